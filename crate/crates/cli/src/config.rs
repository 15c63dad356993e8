use std::path::{Path, PathBuf};

use attnseg::model::ModelConfig;
use attnseg::trainer::TrainConfig;
use attnseg::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::args::{DataArgs, ModelArgs, TrainArgs};

/// Everything a run depends on; echoed to `run_config.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub synthetic: Option<usize>,
    pub test_size: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            data: None,
            synthetic: None,
            test_size: None,
        }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Config file first, then command-line overrides, then validation.
pub fn resolve_model(args: &ModelArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, base) {
        (Some(path), _) => read_json::<RunConfig>(path)?,
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    if let Some(preset) = args.preset {
        if preset != cfg.model.preset {
            let keep = (cfg.model.use_convblock, cfg.model.use_sfeb, cfg.model.use_tam, cfg.model.threshold);
            cfg.model = ModelConfig::new(preset).with_components(keep.0, keep.1, keep.2);
            cfg.model.threshold = keep.3;
        }
    }
    cfg.model.use_tam &= !args.no_tam;
    cfg.model.use_sfeb &= !args.no_sfeb;
    cfg.model.use_convblock &= !args.no_convblock;
    if let Some(t) = args.threshold {
        cfg.model.threshold = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.train.threshold = cfg.model.threshold;
    cfg.model.validate()?;
    Ok(cfg)
}

pub fn resolve_run(model: &ModelArgs, data: &DataArgs, train: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = resolve_model(model, None)?;
    if let Some(d) = &data.data {
        cfg.data = Some(d.clone());
        cfg.synthetic = None;
    }
    if let Some(n) = data.synthetic {
        cfg.synthetic = Some(n);
        cfg.data = None;
    }
    if data.test_size.is_some() {
        cfg.test_size = data.test_size;
    }
    if let Some(b) = train.batch {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = train.lr {
        cfg.train.adam.lr = lr;
    }
    if let Some(e) = train.epochs {
        cfg.train.epochs = e;
    }
    if let Some(f) = train.val_fraction {
        cfg.train.val_fraction = f;
    }
    if cfg.data.is_none() && cfg.synthetic.is_none() {
        return Err(Error::Config("no dataset: pass --data or --synthetic".into()));
    }
    cfg.train.validate()?;
    Ok(cfg)
}
