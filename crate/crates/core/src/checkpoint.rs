//! JSON snapshots of a [`TrainerState`]. Floats are written with round-trip
//! precision, so save followed by load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Sgd, TeacherState, ToyModelParams};
use crate::rng::RngState;
use crate::trainer::TrainerState;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "reco-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub iter: usize,
    pub student: ToyModelParams,
    pub teacher: TeacherState,
    pub sgd: Sgd,
    pub rng: RngState,
    pub contrast_rng: RngState,
}

impl Checkpoint {
    pub fn capture(state: &TrainerState) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            iter: state.iter,
            student: state.student.clone(),
            teacher: state.teacher.clone(),
            sgd: state.sgd.clone(),
            rng: RngState::capture(&state.rng),
            contrast_rng: RngState::capture(&state.contrast_rng),
        }
    }

    pub fn restore(&self) -> Result<TrainerState> {
        self.student.check_same_shape(&self.teacher.params)?;
        self.student.check_same_shape(&self.sgd.velocity)?;
        Ok(TrainerState {
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            sgd: self.sgd.clone(),
            iter: self.iter,
            rng: self.rng.restore()?,
            contrast_rng: self.contrast_rng.restore()?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidData(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
