//! Plain-text run configuration: `key = value` lines grouped under `[section]` headers.
//!
//! Keys may also be written fully qualified (`cluster.k = 3`) anywhere. Unknown
//! keys and unparsable values are rejected with the offending key named.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cluster::IntensitySource;
use crate::data::mask::{Fill, MaskSpec, Region};
use crate::error::{Error, Result};
use crate::nn::model::{ModelSpec, Variant};
use crate::train::TrainConfig;

pub const DATA_DIR_ENV: &str = "PERTURB_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    pub workers: usize,
    pub data_dir: PathBuf,
    /// Optional second dataset whose test split is reported alongside the clean one.
    pub occluded_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub attention: ModelSpec,
    pub predictor: ModelSpec,
    pub train: TrainConfig,
    /// Region used by `maskgen` when none is given on the command line.
    pub mask_region: Region,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            data_dir: std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from),
            occluded_dir: None,
            output_dir: PathBuf::from("runs/default"),
            attention: ModelSpec::default_attention_classifier(),
            predictor: ModelSpec::default_predictor(),
            train: TrainConfig::default(),
            mask_region: MaskSpec::lower_half().region,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}` as {}", std::any::type_name::<T>())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_spec(key: &str, variant: Variant, value: &str) -> Result<ModelSpec> {
    let spec = ModelSpec::parse(variant, value).map_err(|e| Error::config(key, e.to_string()))?;
    spec.validate().map_err(|e| Error::config(key, e.to_string()))?;
    Ok(spec)
}

impl RunConfig {
    /// Sets one fully qualified key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                t.seed = self.seed;
            }
            "workers" => self.workers = parse(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.occluded_dir" => {
                self.occluded_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "output.dir" => self.output_dir = PathBuf::from(value),
            "model.attention_layers" => self.attention = parse_spec(key, Variant::AttentionClassifier, value)?,
            "model.predictor_layers" => self.predictor = parse_spec(key, self.predictor.variant, value)?,
            "model.predictor_variant" => {
                let variant: Variant = value.parse().map_err(|e: Error| Error::config(key, e.to_string()))?;
                self.predictor = parse_spec(key, variant, &self.predictor.layers_string())?;
            }
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.attention_epochs" => t.attention_epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "optimizer.lr0" => t.lr0 = parse(key, value)?,
            "optimizer.momentum" => t.momentum = parse(key, value)?,
            "optimizer.nesterov" => t.nesterov = parse_bool(key, value)?,
            "optimizer.weight_decay" => t.weight_decay = parse(key, value)?,
            "rlrp.factor" => t.rlrp.factor = parse(key, value)?,
            "rlrp.patience" => t.rlrp.patience = parse(key, value)?,
            "rlrp.min_lr" => t.rlrp.min_lr = parse(key, value)?,
            "rlrp.threshold" => t.rlrp.threshold = parse(key, value)?,
            "cluster.k" => t.cluster.k = parse(key, value)?,
            "cluster.lambda" => t.cluster.lambda = parse(key, value)?,
            "cluster.alpha" => t.cluster.alpha = parse(key, value)?,
            "cluster.max_iter" => t.cluster.max_iter = parse(key, value)?,
            "cluster.tol" => t.cluster.tol = parse(key, value)?,
            "cluster.seed" => t.cluster.seed = parse(key, value)?,
            "cluster.restarts" => t.cluster.restarts = parse(key, value)?,
            "cluster.intensity" => {
                t.cluster.intensity = match value {
                    "attention" => IntensitySource::Attention,
                    "pixel" => IntensitySource::Pixel,
                    _ => return Err(Error::config(key, "expected `attention` or `pixel`")),
                }
            }
            "augment.flip_prob" => t.augment.flip_prob = parse(key, value)?,
            "augment.crop_pad" => t.augment.crop_pad = parse(key, value)?,
            "augment.erase_prob" => t.augment.erase_prob = parse(key, value)?,
            "augment.erase_area_min" => t.augment.erase_area.0 = parse(key, value)?,
            "augment.erase_area_max" => t.augment.erase_area.1 = parse(key, value)?,
            "augment.erase_aspect_min" => t.augment.erase_aspect.0 = parse(key, value)?,
            "augment.erase_aspect_max" => t.augment.erase_aspect.1 = parse(key, value)?,
            "mask.prob" => t.mask_prob = parse(key, value)?,
            "mask.fill" => t.fill = value.parse::<Fill>().map_err(|e| Error::config(key, e.to_string()))?,
            "mask.region" => {
                self.mask_region = value.parse::<Region>().map_err(|e| Error::config(key, e.to_string()))?
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.seed != self.seed {
            return Err(Error::config("seed", "train seed out of sync"));
        }
        self.attention.validate().map_err(|e| Error::config("model.attention_layers", e.to_string()))?;
        self.predictor.validate().map_err(|e| Error::config("model.predictor_layers", e.to_string()))?;
        self.mask_region.validate().map_err(|e| Error::config("mask.region", e.to_string()))
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")));
            };
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            cfg.set(&key, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Self::parse_str(&text)
    }

    /// Every key with its current value; `parse_str` of this text reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let c = &t.cluster;
        let a = &t.augment;
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "workers = {}", self.workers);
        let _ = writeln!(out, "\n[data]\ndir = {}", self.data_dir.display());
        let _ = writeln!(
            out,
            "occluded_dir = {}",
            self.occluded_dir.as_ref().map_or(String::new(), |p| p.display().to_string())
        );
        let _ = writeln!(out, "\n[output]\ndir = {}", self.output_dir.display());
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "attention_layers = {}", self.attention.layers_string());
        let _ = writeln!(out, "predictor_variant = {}", self.predictor.variant);
        let _ = writeln!(out, "predictor_layers = {}", self.predictor.layers_string());
        let _ = writeln!(
            out,
            "\n[train]\nepochs = {}\nattention_epochs = {}\nbatch_size = {}",
            t.epochs, t.attention_epochs, t.batch_size
        );
        let _ = writeln!(
            out,
            "\n[optimizer]\nlr0 = {:?}\nmomentum = {:?}\nnesterov = {}\nweight_decay = {:?}",
            t.lr0, t.momentum, t.nesterov, t.weight_decay
        );
        let _ = writeln!(
            out,
            "\n[rlrp]\nfactor = {:?}\npatience = {}\nmin_lr = {:?}\nthreshold = {:?}",
            t.rlrp.factor, t.rlrp.patience, t.rlrp.min_lr, t.rlrp.threshold
        );
        let intensity = match c.intensity {
            IntensitySource::Attention => "attention",
            IntensitySource::Pixel => "pixel",
        };
        let _ = writeln!(
            out,
            "\n[cluster]\nk = {}\nlambda = {:?}\nalpha = {:?}\nmax_iter = {}\ntol = {:?}\nseed = {}\nrestarts = {}\nintensity = {intensity}",
            c.k, c.lambda, c.alpha, c.max_iter, c.tol, c.seed, c.restarts
        );
        let _ = writeln!(
            out,
            "\n[augment]\nflip_prob = {:?}\ncrop_pad = {}\nerase_prob = {:?}\nerase_area_min = {:?}\nerase_area_max = {:?}\nerase_aspect_min = {:?}\nerase_aspect_max = {:?}",
            a.flip_prob, a.crop_pad, a.erase_prob, a.erase_area.0, a.erase_area.1, a.erase_aspect.0, a.erase_aspect.1
        );
        let fill = match t.fill {
            Fill::Mean => "mean".to_string(),
            Fill::Value(v) => format!("{v:?}"),
        };
        let _ = writeln!(out, "\n[mask]\nprob = {:?}\nfill = {fill}\nregion = {}", t.mask_prob, self.mask_region);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(Error::file(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{DEFAULT_ATTENTION_LAYERS, DEFAULT_PREDICTOR_LAYERS};

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse_str("").unwrap();
        assert_eq!(c.train.cluster.lambda, 1.5);
        assert_eq!(c.train.cluster.alpha, 1.2);
        assert_eq!(c.train.cluster.k, 3);
        assert_eq!(c.train.lr0, 0.01);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.seed, 0);
        assert_eq!(c.attention.layers_string(), DEFAULT_ATTENTION_LAYERS);
        assert_eq!(c.predictor.layers_string(), DEFAULT_PREDICTOR_LAYERS);
    }

    #[test]
    fn sections_and_dotted_keys() {
        let c = RunConfig::parse_str("seed = 4\n[cluster]\nk = 5 # comment\n\noptimizer.momentum = 0.5\n").unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.cluster.k, c.train.momentum), (4, 4, 5, 0.5));
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |text: &str| match RunConfig::parse_str(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key_of("cluster.k = 0"), "cluster.k");
        assert_eq!(key_of("[cluster]\nbogus = 1"), "cluster.bogus");
        assert_eq!(key_of("optimizer.lr0 = fast"), "optimizer.lr0");
        assert_eq!(key_of("[optimizer]\nmomentum = 1.5"), "optimizer.momentum");
        assert_eq!(key_of("model.attention_layers = gap, dense:7"), "model.attention_layers");
    }

    #[test]
    fn save_load_round_trip() {
        let mut c = RunConfig::parse_str("optimizer.momentum = 0.9\nmask.fill = 0.25\ndata.occluded_dir = occ").unwrap();
        c.train.lr0 = 0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        c.save(&p).unwrap();
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.momentum, 0.9);
    }
}
