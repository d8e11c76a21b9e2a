use hknas_core::hyperkernel::Candidate;
use hknas_core::mixedop::{AlphaMode, EdgeKind, Form};
use hknas_core::ndtensor::Tensor;
use hknas_core::searchspace::{build, ArchEntry, ArchitectureMatrix, Edge, NetKind, Network, NetworkTemplate, Scene};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

#[test]
fn reference_architectures_round_trip() {
    for &(scene, kind, rows) in common::REFERENCE_ARCHS {
        let text = common::arch_text(rows);
        let arch = ArchitectureMatrix::parse(&text).unwrap();
        assert_eq!(arch.encode(), text, "{scene:?} {kind}");
        let t = NetworkTemplate::preset(scene, kind, 10, 4).unwrap();
        let ops = arch.to_derived(&t).unwrap_or_else(|e| panic!("{scene:?} {kind}: {e}"));
        assert_eq!(ArchitectureMatrix::from_derived(&ops).unwrap(), arch);
        let net = Network::derived(&t, &arch, 0).unwrap();
        assert_eq!(net.architecture().unwrap().encode(), text);
    }
}

#[test]
fn pavia_segmentation_entries_are_serial_pairs() {
    let t = NetworkTemplate::preset(Scene::PaviaUniversity, NetKind::Seg3d, 10, 4).unwrap();
    let ops = ArchitectureMatrix::parse("23\n23\n23\n")
        .unwrap()
        .to_derived(&t)
        .unwrap();
    for row in &ops {
        let op = &row[0];
        assert_eq!(op.kind, EdgeKind::Cube(Form::Serial1dThen2dDw));
        // Spectral 1-D kernel of extent 7 first, then a 9x9 depthwise kernel.
        assert_eq!(op.ops.iter().map(|c| c.extent()).collect::<Vec<_>>(), [7, 9]);
    }
    let err = ArchitectureMatrix::parse("23\n99\n23\n")
        .unwrap()
        .to_derived(&t)
        .unwrap_err()
        .to_string();
    assert!(err.contains("row 2, column 1"), "{err}");
    let err = ArchitectureMatrix::parse("23\n23\n3/2\n")
        .unwrap()
        .to_derived(&t)
        .unwrap_err()
        .to_string();
    assert!(err.contains("row 3, column 1"), "{err}");
    assert!(ArchitectureMatrix::parse("23\n23\n").unwrap().to_derived(&t).is_err());
}

#[test]
fn malformed_text_names_position() {
    let err = ArchitectureMatrix::parse("1 2\n3 x4\n").unwrap_err().to_string();
    assert!(err.contains("line 2, column 2"), "{err}");
    assert!(ArchitectureMatrix::parse("").is_err());
    assert_eq!(ArchitectureMatrix::parse("# searched\n0\n\n").unwrap().encode(), "0\n");
}

/// Writes ones into the core area of the chosen candidate of every kernel
/// of `net`'s only edge, zeros elsewhere.
fn favor(net: &mut Network, codes: &[usize]) {
    let edge = net.mixed_edges_mut().pop().unwrap();
    for (k, &code) in edge.kernels_mut().iter_mut().zip(codes) {
        let core = k.masks().core_mask(Candidate::from_code(code)).to_vec();
        let fp = core.len();
        for (i, w) in k.weights.value.data_mut().iter_mut().enumerate() {
            *w = f64::from(core[i % fp]);
        }
    }
}

#[test]
fn derivation_reads_hyper_kernel_weights() {
    let cases = [
        (Form::Serial1dThen2dDw, [1, 2], "12"),
        (Form::Serial2dDwThen1d, [1, 2], "21"),
        (Form::Parallel1d2dDw, [2, 1], "2/1"),
    ];
    for (form, codes, want) in cases {
        let mut t = NetworkTemplate::new(NetKind::Seg3d, 1, 1, Some(form), 4, 3).unwrap();
        t.initial_channels = 32;
        let mut net = build(&t, 5).unwrap();
        favor(&mut net, &codes);
        assert_eq!(
            net.derive_architecture().unwrap().encode(),
            format!("{want}\n"),
            "{form}"
        );
    }
    let mut t = NetworkTemplate::new(NetKind::Seg3d, 1, 1, Some(Form::Conv3d), 4, 3).unwrap();
    t.initial_channels = 32;
    let mut net = build(&t, 5).unwrap();
    favor(&mut net, &[1]);
    let arch = net.derive_architecture().unwrap();
    assert_eq!(arch.rows[0][0], ArchEntry::Single(1));
    let ops = arch.to_derived(&t).unwrap();
    assert_eq!(ops[0][0].ops[0].extent(), 5);
}

#[test]
fn residual_identity_with_zero_expand() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cases: [(NetKind, Option<Form>, &[usize]); 3] = [
        (NetKind::Cls1d, None, &[3, 64, 12]),
        (NetKind::Cls3d, Some(Form::Serial2dDwThen1d), &[2, 64, 5, 5]),
        (NetKind::Seg3d, Some(Form::Parallel1d2dDw), &[1, 64, 6, 7]),
    ];
    for (kind, form, shape) in cases {
        let blocks = if kind == NetKind::Cls3d { 3 } else { 1 };
        let t = NetworkTemplate::new(kind, blocks, 2, form, 6, 3).unwrap();
        let mut net = build(&t, 2).unwrap();
        let x = Tensor::randn(shape, &mut rng);
        let layer = &mut net.blocks[0].layers[1];
        assert!(layer.apply(&x).unwrap().data() != x.data());
        layer.expand_weights_mut().data_mut().fill(0.0);
        assert_eq!(layer.apply(&x).unwrap().data(), x.data(), "{kind}");
    }
}

/// Blocks followed by a width-doubling downsample, from the template rules.
fn schedule(kind: NetKind, m: usize) -> Vec<usize> {
    match kind {
        NetKind::Cls1d => {
            let mut v: Vec<usize> = [m / 4, m / 2, 3 * m / 4].iter().map(|&b| b.max(1)).collect();
            v.dedup();
            v
        }
        NetKind::Cls3d => (1..=m).collect(),
        NetKind::Seg3d => vec![1],
    }
}

#[test]
fn channel_walk() {
    for kind in [NetKind::Cls1d, NetKind::Cls3d, NetKind::Seg3d] {
        let form = kind.is_cube().then_some(Form::Conv3d);
        for m in 1..=6 {
            for n in 1..=5 {
                let t = NetworkTemplate::new(kind, m, n, form, 3, 2);
                if kind == NetKind::Cls3d && m != 3 {
                    assert!(t.is_err());
                    continue;
                }
                let t = t.unwrap();
                let down = schedule(kind, m);
                let mut width = 64;
                let mut widths = vec![];
                for b in 1..=m {
                    widths.push(width);
                    if down.contains(&b) {
                        width *= 2;
                    }
                }
                assert_eq!(t.block_widths(), widths, "{kind} M={m}");
                assert_eq!(t.final_width(), width, "{kind} M={m}");
                let net = build(&t, 0).unwrap();
                for (block, &w) in net.blocks.iter().zip(&widths) {
                    assert_eq!(block.layers.len(), n);
                    for layer in &block.layers {
                        assert_eq!(layer.width(), w);
                        let Edge::Mixed(e) = &layer.edge else {
                            panic!("search network has a fixed edge")
                        };
                        assert_eq!(e.channels(), w / 4);
                    }
                }
            }
        }
    }
    let t = NetworkTemplate::new(NetKind::Cls1d, 6, 5, None, 3, 2).unwrap();
    assert_eq!(t.downsample_after(), [1, 3, 4]);
}

#[test]
fn segmentation_keeps_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (h, w) in [(8, 8), (15, 13), (5, 9), (1, 1)] {
        let mut t = NetworkTemplate::new(NetKind::Seg3d, 3, 1, Some(Form::Serial1dThen2dDw), 4, 5).unwrap();
        t.initial_channels = 32;
        let net = build(&t, 1).unwrap();
        let y = net.predict(&Tensor::randn(&[1, 4, h, w], &mut rng)).unwrap();
        assert_eq!(y.shape(), &[1, 5, h, w]);
        assert!(y.is_finite());
    }
}

/// Entry for `form` with codes `a` and `b` (`b` unused by single-kernel forms).
fn entry(form: Option<Form>, a: usize, b: usize) -> ArchEntry {
    match form {
        None | Some(Form::Conv3d) => ArchEntry::Single(a),
        Some(Form::Parallel1d2dDw) => ArchEntry::Parallel(a, b),
        Some(_) => ArchEntry::Serial(a, b),
    }
}

fn random_entry(form: Option<Form>, rng: &mut ChaCha8Rng) -> ArchEntry {
    entry(form, rng.random_range(0..4), rng.random_range(0..4))
}

const FORMS: [Option<Form>; 5] = [
    None,
    Some(Form::Conv3d),
    Some(Form::Serial1dThen2dDw),
    Some(Form::Serial2dDwThen1d),
    Some(Form::Parallel1d2dDw),
];

#[test]
fn derived_networks_are_smaller() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for form in FORMS {
        let kind = if form.is_some() { NetKind::Cls3d } else { NetKind::Cls1d };
        let t = NetworkTemplate::new(kind, 3, 2, form, 8, 4).unwrap();
        let search = Network::search(&t, AlphaMode::Hyper, 0).unwrap().param_count();
        let largest = entry(form, 3, 3);
        for _ in 0..5 {
            let mut arch = ArchitectureMatrix::new(
                (0..3)
                    .map(|_| (0..2).map(|_| random_entry(form, &mut rng)).collect())
                    .collect(),
            );
            if arch.rows.iter().flatten().all(|&e| e == largest) {
                arch.rows[0][0] = entry(form, 0, 3);
            }
            let derived = Network::derived(&t, &arch, 0).unwrap().param_count();
            assert!(derived < search, "{form:?} {arch}: {derived} >= {search}");
        }
        // Picking the largest candidate everywhere keeps the full hyper kernels.
        let max = ArchitectureMatrix::new(vec![vec![largest; 2]; 3]);
        assert_eq!(Network::derived(&t, &max, 0).unwrap().param_count(), search);
    }
}

proptest! {
    #[test]
    fn random_matrices_round_trip(seed in 0u64..10_000, rows in 1usize..7, cols in 1usize..6, f in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let form = FORMS[f];
        let arch = ArchitectureMatrix::new((0..rows).map(|_| (0..cols).map(|_| random_entry(form, &mut rng)).collect()).collect());
        let text = arch.encode();
        prop_assert_eq!(ArchitectureMatrix::parse(&text).unwrap(), arch.clone());
        let kind = match form { None => NetKind::Cls1d, Some(_) => NetKind::Seg3d };
        let mut t = NetworkTemplate::new(kind, rows, cols, form, 4, 3).unwrap();
        t.initial_channels = 32;
        let ops = arch.to_derived(&t).unwrap();
        prop_assert_eq!(ArchitectureMatrix::from_derived(&ops).unwrap(), arch);
    }
}
