use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mixedop::{EdgeKind, Form};
use crate::ndtensor::NormMode;

/// The three network families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetKind {
    /// Pixel classifier over the spectral vector.
    Cls1d,
    /// Pixel classifier over a spatial patch.
    Cls3d,
    /// Whole-scene classification map.
    Seg3d,
}

impl NetKind {
    pub fn name(self) -> &'static str {
        match self {
            NetKind::Cls1d => "cls1d",
            NetKind::Cls3d => "cls3d",
            NetKind::Seg3d => "seg3d",
        }
    }

    pub fn is_cube(self) -> bool {
        self != NetKind::Cls1d
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [NetKind::Cls1d, NetKind::Cls3d, NetKind::Seg3d]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown network kind {s:?}")))
    }
}

/// Benchmark scenes with their default settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scene {
    IndianPines,
    PaviaUniversity,
    KennedySpaceCenter,
    Salinas,
    HanChuan,
    HongHu,
}

impl Scene {
    pub const ALL: [Scene; 6] = [
        Scene::IndianPines,
        Scene::PaviaUniversity,
        Scene::KennedySpaceCenter,
        Scene::Salinas,
        Scene::HanChuan,
        Scene::HongHu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scene::IndianPines => "indian_pines",
            Scene::PaviaUniversity => "pavia_university",
            Scene::KennedySpaceCenter => "ksc",
            Scene::Salinas => "salinas",
            Scene::HanChuan => "hanchuan",
            Scene::HongHu => "honghu",
        }
    }

    /// Default `(M, N)` for a network kind.
    pub fn depth(self, kind: NetKind) -> (usize, usize) {
        use NetKind::*;
        use Scene::*;
        match (self, kind) {
            (IndianPines, Cls1d) => (6, 5),
            (IndianPines, Cls3d) => (3, 4),
            (PaviaUniversity, Cls1d) => (4, 1),
            (KennedySpaceCenter, Cls1d) => (3, 2),
            (Salinas, Cls1d) => (4, 1),
            (HanChuan, Cls1d) => (3, 3),
            (HanChuan, Cls3d) => (3, 2),
            (HongHu, Cls1d) => (3, 1),
            (HongHu, Cls3d) => (3, 3),
            (_, Cls3d) => (3, 2),
            (_, Seg3d) => (3, 1),
        }
    }

    /// Default realization of 3-D convolutions.
    pub fn form(self, kind: NetKind) -> Option<Form> {
        use Scene::*;
        match kind {
            NetKind::Cls1d => None,
            NetKind::Cls3d => Some(match self {
                IndianPines | KennedySpaceCenter | Salinas => Form::Conv3d,
                PaviaUniversity | HanChuan | HongHu => Form::Parallel1d2dDw,
            }),
            NetKind::Seg3d => Some(match self {
                PaviaUniversity | KennedySpaceCenter => Form::Serial1dThen2dDw,
                IndianPines | Salinas | HanChuan | HongHu => Form::Conv3d,
            }),
        }
    }
}

impl FromStr for Scene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scene::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scene {s:?}")))
    }
}

/// Macro skeleton of a network; the searched part is the per-layer edge choice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkTemplate {
    pub kind: NetKind,
    /// Block count M.
    pub blocks: usize,
    /// Layers per block N.
    pub layers: usize,
    /// Required for the cube kinds, absent for `cls1d`.
    pub form: Option<Form>,
    pub hyper_size: usize,
    pub initial_channels: usize,
    /// Length the `cls1d` stem maps the spectrum to.
    pub stem_length: usize,
    /// Spatial side of `cls3d` input patches.
    pub patch: usize,
    pub bands: usize,
    pub classes: usize,
}

pub const GROUP_NORM_GROUPS: usize = 8;

impl NetworkTemplate {
    pub fn new(
        kind: NetKind,
        blocks: usize,
        layers: usize,
        form: Option<Form>,
        bands: usize,
        classes: usize,
    ) -> Result<Self> {
        let t = NetworkTemplate {
            kind,
            blocks,
            layers,
            form,
            hyper_size: 9,
            initial_channels: 64,
            stem_length: 96,
            patch: 27,
            bands,
            classes,
        };
        t.validate()?;
        Ok(t)
    }

    /// Default depth and form for `scene`.
    pub fn preset(scene: Scene, kind: NetKind, bands: usize, classes: usize) -> Result<Self> {
        let (m, n) = scene.depth(kind);
        Self::new(kind, m, n, scene.form(kind), bands, classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks < 1 || self.layers < 1 {
            return bad(format!(
                "block count ({}) and layer count ({}) must be at least 1",
                self.blocks, self.layers
            ));
        }
        if self.kind == NetKind::Cls3d && self.blocks != 3 {
            return bad(format!("cls3d networks need exactly 3 blocks, got {}", self.blocks));
        }
        match (self.kind.is_cube(), self.form) {
            (true, None) => return bad(format!("{} networks need a 3-D convolution form", self.kind)),
            (false, Some(f)) => return bad(format!("cls1d networks take no 3-D form, got {f}")),
            _ => {}
        }
        if self.hyper_size < 3 || self.hyper_size.is_multiple_of(2) {
            return bad(format!(
                "hyper-kernel size must be odd and at least 3, got {}",
                self.hyper_size
            ));
        }
        if self.initial_channels == 0 || !self.initial_channels.is_multiple_of(4) {
            return bad(format!(
                "initial channels must be a positive multiple of 4, got {}",
                self.initial_channels
            ));
        }
        if self.kind == NetKind::Seg3d && !(self.initial_channels / 4).is_multiple_of(GROUP_NORM_GROUPS) {
            return bad(format!(
                "seg3d initial channels must be a multiple of {}",
                4 * GROUP_NORM_GROUPS
            ));
        }
        if self.bands == 0 || self.classes < 2 {
            return bad(format!(
                "need at least one band and two classes, got {} and {}",
                self.bands, self.classes
            ));
        }
        if self.stem_length == 0 || self.patch == 0 {
            return bad("stem length and patch size must be positive".into());
        }
        Ok(())
    }

    pub fn edge_kind(&self) -> EdgeKind {
        match self.form {
            None => EdgeKind::Spectral,
            Some(f) => EdgeKind::Cube(f),
        }
    }

    pub fn norm_mode(&self) -> NormMode {
        match self.kind {
            NetKind::Seg3d => NormMode::Group(GROUP_NORM_GROUPS),
            _ => NormMode::Batch,
        }
    }

    /// 1-based indices of the blocks followed by a downsample.
    pub fn downsample_after(&self) -> Vec<usize> {
        let m = self.blocks;
        match self.kind {
            NetKind::Cls1d => {
                let mut v: Vec<usize> = (1..=3).map(|q| (q * m / 4).max(1)).collect();
                v.dedup();
                v
            }
            NetKind::Cls3d => (1..=m).collect(),
            NetKind::Seg3d => vec![1],
        }
    }

    /// Channel width inside each block.
    pub fn block_widths(&self) -> Vec<usize> {
        let down = self.downsample_after();
        let mut c = self.initial_channels;
        (1..=self.blocks)
            .map(|b| {
                let w = c;
                if down.contains(&b) {
                    c *= 2;
                }
                w
            })
            .collect()
    }

    /// Width after the last block (and its downsample, if any).
    pub fn final_width(&self) -> usize {
        let down = self.downsample_after();
        self.initial_channels << down.iter().filter(|&&b| b <= self.blocks).count()
    }

    /// Per-sample input shape, batch axis excluded. `image` is the scene
    /// `(H, W)` and only matters for `seg3d`.
    pub fn input_shape(&self, image: (usize, usize)) -> Vec<usize> {
        match self.kind {
            NetKind::Cls1d => vec![self.bands],
            NetKind::Cls3d => vec![self.bands, self.patch, self.patch],
            NetKind::Seg3d => vec![self.bands, image.0, image.1],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_schedules() {
        let t = |m| NetworkTemplate::new(NetKind::Cls1d, m, 1, None, 10, 3).unwrap();
        assert_eq!(t(6).downsample_after(), vec![1, 3, 4]);
        assert_eq!(t(4).downsample_after(), vec![1, 2, 3]);
        assert_eq!(t(2).downsample_after(), vec![1]);
        assert_eq!(t(1).downsample_after(), vec![1]);
        assert_eq!(t(6).block_widths(), vec![64, 128, 128, 256, 512, 512]);
        assert_eq!(t(6).final_width(), 512);

        let c = NetworkTemplate::new(NetKind::Cls3d, 3, 2, Some(Form::Conv3d), 10, 3).unwrap();
        assert_eq!(c.block_widths(), vec![64, 128, 256]);
        assert_eq!(c.final_width(), 512);

        let s = NetworkTemplate::new(NetKind::Seg3d, 3, 1, Some(Form::Conv3d), 10, 3).unwrap();
        assert_eq!(s.block_widths(), vec![64, 128, 128]);
        assert_eq!(s.final_width(), 128);
    }

    #[test]
    fn invalid_templates() {
        assert!(NetworkTemplate::new(NetKind::Cls3d, 2, 1, Some(Form::Conv3d), 10, 3).is_err());
        assert!(NetworkTemplate::new(NetKind::Cls1d, 0, 1, None, 10, 3).is_err());
        assert!(NetworkTemplate::new(NetKind::Cls1d, 1, 0, None, 10, 3).is_err());
        assert!(NetworkTemplate::new(NetKind::Cls1d, 1, 1, Some(Form::Conv3d), 10, 3).is_err());
        assert!(NetworkTemplate::new(NetKind::Seg3d, 1, 1, None, 10, 3).is_err());
    }

    #[test]
    fn presets() {
        let t = NetworkTemplate::preset(Scene::IndianPines, NetKind::Cls1d, 200, 16).unwrap();
        assert_eq!((t.blocks, t.layers), (6, 5));
        let t = NetworkTemplate::preset(Scene::PaviaUniversity, NetKind::Cls3d, 103, 9).unwrap();
        assert_eq!((t.blocks, t.layers, t.form), (3, 2, Some(Form::Parallel1d2dDw)));
        for s in &Scene::ALL[..4] {
            let t = NetworkTemplate::preset(*s, NetKind::Seg3d, 100, 9).unwrap();
            assert_eq!((t.blocks, t.layers), (3, 1));
        }
    }
}
