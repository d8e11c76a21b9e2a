//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::mixedop::{AlphaMode, Form};
use crate::optim::OptimConfig;
use crate::searchspace::{NetKind, NetworkTemplate, Scene};

const KEYS: &[&str] = &[
    "kind",
    "scene",
    "blocks",
    "layers",
    "form",
    "hyper_size",
    "initial_channels",
    "stem_length",
    "patch",
    "cube",
    "labels",
    "split",
    "synth_classes",
    "synth_height",
    "synth_width",
    "synth_bands",
    "synth_noise",
    "synth_seed",
    "knowable",
    "knowable_overrides",
    "split_seed",
    "lr",
    "min_lr",
    "weight_decay",
    "momentum",
    "batch_size",
    "alpha_lr",
    "search_epochs",
    "train_epochs",
    "alpha_mode",
    "two_tier",
    "seed",
    "out",
];

/// Parses `key = value` lines into a map; unknown or repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("config line {}: expected key = value", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("config line {}: unknown key {k:?}", i + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("config line {}: key {k:?} repeated", i + 1)));
        }
    }
    Ok(map)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Files { cube: PathBuf, labels: PathBuf },
    Synthetic(SynthSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub kind: NetKind,
    pub blocks: usize,
    pub layers: usize,
    pub form: Option<Form>,
    pub hyper_size: usize,
    pub initial_channels: usize,
    pub stem_length: usize,
    pub patch: usize,
    pub data: DataSource,
    /// Precomputed split file; otherwise the split is drawn from `split_spec`.
    pub split_file: Option<PathBuf>,
    pub split_spec: SplitSpec,
    pub search: OptimConfig,
    pub train: OptimConfig,
    pub alpha_mode: AlphaMode,
    pub two_tier: bool,
    pub seed: u64,
    pub out: PathBuf,
}

struct Pairs {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Pairs {
    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.map
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("config key {key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.map.get(key).map(|v| self.base.join(v))
    }
}

impl RunConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let p = Pairs {
            map: parse_pairs(text)?,
            base: base.to_path_buf(),
        };
        let kind: NetKind = p
            .map
            .get("kind")
            .ok_or_else(|| Error::Config("config needs a `kind` (cls1d, cls3d or seg3d)".into()))?
            .parse()?;
        let scene: Option<Scene> = p.map.get("scene").map(|s| s.parse()).transpose()?;
        let preset = scene.map(|s| (s.depth(kind), s.form(kind)));
        let blocks = p.get("blocks")?.or(preset.map(|x| x.0 .0));
        let layers = p.get("layers")?.or(preset.map(|x| x.0 .1));
        let (Some(blocks), Some(layers)) = (blocks, layers) else {
            return Err(Error::Config(
                "config needs `blocks` and `layers` or a `scene` preset".into(),
            ));
        };
        let form = match p.map.get("form") {
            Some(f) => Some(f.parse::<Form>()?),
            None => preset.and_then(|x| x.1),
        };
        let data = match (p.path("cube"), p.path("labels")) {
            (Some(cube), Some(labels)) => DataSource::Files { cube, labels },
            (None, None) => {
                let need = |k: &str| -> Result<usize> {
                    p.get(k)?
                        .ok_or_else(|| Error::Config(format!("config needs `cube`/`labels` or `{k}`")))
                };
                DataSource::Synthetic(SynthSpec {
                    classes: need("synth_classes")?,
                    height: need("synth_height")?,
                    width: need("synth_width")?,
                    bands: need("synth_bands")?,
                    noise: p.or("synth_noise", 0.0)?,
                    seed: p.or("synth_seed", 0)?,
                })
            }
            _ => return Err(Error::Config("`cube` and `labels` must be given together".into())),
        };
        let mut split_spec = SplitSpec::new(p.or("knowable", 20)?, p.or("split_seed", 0)?);
        if let Some(list) = p.map.get("knowable_overrides") {
            for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let parsed = item
                    .split_once(':')
                    .and_then(|(c, n)| Some((c.trim().parse::<u16>().ok()?, n.trim().parse::<usize>().ok()?)));
                let Some((c, n)) = parsed else {
                    return Err(Error::Config(format!(
                        "knowable_overrides: expected class:count, got {item:?}"
                    )));
                };
                split_spec.overrides.insert(c, n);
            }
        }
        let optim = |mut cfg: OptimConfig, epochs_key: &str| -> Result<OptimConfig> {
            cfg.initial_lr = p.or("lr", cfg.initial_lr)?;
            cfg.min_lr = p.or("min_lr", cfg.min_lr)?;
            cfg.weight_decay = p.or("weight_decay", cfg.weight_decay)?;
            cfg.momentum = p.or("momentum", cfg.momentum)?;
            cfg.batch_size = p.or("batch_size", cfg.batch_size)?;
            cfg.alpha_lr = p.or("alpha_lr", cfg.alpha_lr)?;
            cfg.epochs = p.or(epochs_key, cfg.epochs)?;
            cfg.validate()?;
            Ok(cfg)
        };
        let cfg = RunConfig {
            kind,
            blocks,
            layers,
            form,
            hyper_size: p.or("hyper_size", 9)?,
            initial_channels: p.or("initial_channels", 64)?,
            stem_length: p.or("stem_length", 96)?,
            patch: p.or("patch", 27)?,
            data,
            split_file: p.path("split"),
            split_spec,
            search: optim(OptimConfig::search_defaults(kind), "search_epochs")?,
            train: optim(OptimConfig::train_defaults(kind), "train_epochs")?,
            alpha_mode: p.or("alpha_mode", AlphaMode::Hyper)?,
            two_tier: p.or("two_tier", false)?,
            seed: p.or("seed", 0)?,
            out: p.path("out").unwrap_or_else(|| base.join("out")),
        };
        // Structural checks that do not depend on the data.
        cfg.template(1, 2)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Network template for data with `bands` bands and `classes` classes.
    pub fn template(&self, bands: usize, classes: usize) -> Result<NetworkTemplate> {
        let t = NetworkTemplate {
            kind: self.kind,
            blocks: self.blocks,
            layers: self.layers,
            form: self.form,
            hyper_size: self.hyper_size,
            initial_channels: self.initial_channels,
            stem_length: self.stem_length,
            patch: self.patch,
            bands,
            classes,
        };
        t.validate()?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_overrides() {
        let text = "kind = cls3d\nscene = pavia_university # defaults\nsynth_classes = 4\nsynth_height = 8\nsynth_width = 8\nsynth_bands = 5\nbatch_size = 8\nknowable_overrides = 2:14, 3:10\n";
        let c = RunConfig::parse(text, Path::new("/tmp")).unwrap();
        assert_eq!((c.blocks, c.layers, c.form), (3, 2, Some(Form::Parallel1d2dDw)));
        assert_eq!(c.search.batch_size, 8);
        assert_eq!(c.search.epochs, 100);
        assert_eq!(c.train.epochs, 300);
        assert_eq!(c.split_spec.knowable_for(2), 14);
        assert_eq!(c.split_spec.knowable_for(1), 20);
    }

    #[test]
    fn errors() {
        let base = Path::new(".");
        assert!(RunConfig::parse("kind = cls1d\nblocks = 2\n", base).is_err());
        let err = RunConfig::parse(
            "kind = cls3d\nblocks = 2\nlayers = 1\nform = conv3d\ncube = a\nlabels = b\n",
            base,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("3 blocks"), "{err}");
        let err = parse_pairs("a = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        assert!(parse_pairs("kind\n").is_err());
        assert!(parse_pairs("seed = 1\nseed = 2\n").is_err());
    }
}
