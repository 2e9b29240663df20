use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, Params};
use crate::tensor::{ptv, Tensor};

use super::{io_err, log_csv, parse_log_csv, AdamState, LogRow, TrainConfig, TrainError, LOG_FILE};

pub const STATE_VERSION: u32 = 1;
const STATE_FILE: &str = "state.json";
const ADAM_DIR: &str = "adam";

#[derive(Serialize, Deserialize)]
struct StateFile {
    format_version: u32,
    step: usize,
    adam_t: u64,
    seed: u64,
}

/// Everything needed to continue a run bit-exactly. Random draws are keyed by
/// `(seed, step, index)`, so the step counter doubles as the RNG state.
///
/// A saved state directory is also a plain model checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: Params<f32>,
    pub adam: AdamState<f32>,
    pub seed: u64,
    pub log: Vec<LogRow>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let params = Params::init(&cfg.model)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            step: 0,
            params,
            adam,
            seed: cfg.seed,
            log: Vec::new(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        self.params.save(dir)?;
        for (which, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            let sub = dir.join(ADAM_DIR).join(which);
            fs::create_dir_all(&sub).map_err(|e| io_err(&sub, e))?;
            for (name, t) in moments {
                let p = sub.join(format!("{name}.ptv"));
                ptv::write(&p, t).map_err(|e| state_err(&p, e))?;
            }
        }
        let meta = StateFile {
            format_version: STATE_VERSION,
            step: self.step,
            adam_t: self.adam.t,
            seed: self.seed,
        };
        let p = dir.join(STATE_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("state serializes") + "\n";
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        let p = dir.join(LOG_FILE);
        fs::write(&p, log_csv(&self.log)).map_err(|e| io_err(&p, e))
    }

    /// Loads a state saved by [`TrainState::save`]. With `expected` the
    /// stored weights must match that configuration's layout.
    pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Self, TrainError> {
        let params = Params::<f32>::load(dir, expected)?;
        let p = dir.join(STATE_FILE);
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        let meta: StateFile = serde_json::from_str(&text).map_err(|e| state_err(&p, e))?;
        if meta.format_version != STATE_VERSION {
            return Err(state_err(
                &p,
                format!("format version {} (expected {STATE_VERSION})", meta.format_version),
            ));
        }
        let mut adam = AdamState::new(&params);
        adam.t = meta.adam_t;
        for (which, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            let sub = dir.join(ADAM_DIR).join(which);
            for (name, slot) in moments.iter_mut() {
                let p = sub.join(format!("{name}.ptv"));
                let t: Tensor<f32> = ptv::read(&p).map_err(|e| state_err(&p, e))?;
                if t.shape() != slot.shape() {
                    return Err(state_err(
                        &p,
                        format!("moment {name} has shape {:?}, weight {:?}", t.shape(), slot.shape()),
                    ));
                }
                *slot = t;
            }
        }
        let p = dir.join(LOG_FILE);
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        let log = parse_log_csv(&text).map_err(|e| state_err(&p, e))?;
        Ok(Self {
            step: meta.step,
            params,
            adam,
            seed: meta.seed,
            log,
        })
    }

    /// Moments keyed by weight name, for inspection.
    pub fn moments(&self) -> (&BTreeMap<String, Tensor<f32>>, &BTreeMap<String, Tensor<f32>>) {
        (&self.adam.m, &self.adam.v)
    }
}

fn state_err(path: &Path, e: impl ToString) -> TrainError {
    TrainError::State {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d: 8,
                depth: 1,
                heads: 2,
                patch: 2,
                variant: Variant::QuerySharedRt,
                seed: 4,
            },
            ..TrainConfig::default()
        }
    }

    fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    out.insert(rel, fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut s = TrainState::new(&cfg()).unwrap();
        s.params.randomize(1, 0.3, |_| true);
        s.step = 17;
        s.adam.t = 17;
        for (i, m) in s.adam.m.values_mut().enumerate() {
            m.data_mut().iter_mut().for_each(|x| *x = 0.01 * i as f32 - 0.3);
        }
        s.log.push(LogRow {
            step: 16,
            stage: 1,
            loss: 0.123456789,
            rot_err: Some(0.5),
            trans_err: None,
        });
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        s.save(&a).unwrap();
        let loaded = TrainState::load(&a, None).unwrap();
        assert_eq!(loaded, s);
        loaded.save(&b).unwrap();
        let (ta, tb) = (read_tree(&a), read_tree(&b));
        assert!(ta.len() > 5);
        assert_eq!(ta, tb);
    }

    #[test]
    fn load_names_the_mismatched_shape() {
        let tmp = tempfile::tempdir().unwrap();
        TrainState::new(&cfg()).unwrap().save(tmp.path()).unwrap();
        let other = ModelConfig { d: 12, ..cfg().model };
        let err = TrainState::load(tmp.path(), Some(&other)).unwrap_err().to_string();
        assert!(err.contains("has shape"), "{err}");
        assert!(err.contains("[8") || err.contains(", 8"), "{err}");
    }
}
