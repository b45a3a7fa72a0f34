use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Variant;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParameterStore};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Vlr,
    Llr,
    Decoder,
}

impl StageTag {
    /// The command that produces this stage's checkpoint.
    pub fn command(self) -> &'static str {
        match self {
            StageTag::Vlr => "hrgen pretrain-vlr",
            StageTag::Llr => "hrgen pretrain-llr",
            StageTag::Decoder => "hrgen train",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Vlr => "vlr",
            StageTag::Llr => "llr",
            StageTag::Decoder => "decoder",
        })
    }
}

/// Parameters, optimizer state and provenance of one trained stage,
/// stored as JSON with exact float round-tripping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: StageTag,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub params: ParameterStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(stage: StageTag, fingerprint: String, params: ParameterStore, optimizer: Option<AdamState>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            stage,
            fingerprint,
            variant: None,
            params,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads and checks format version, stage and config fingerprint.
    pub fn load(path: &Path, stage: StageTag, fingerprint: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                what: format!("{stage} checkpoint"),
                path: path.to_path_buf(),
                command: stage.command(),
            });
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint {} has format version {}, expected {FORMAT_VERSION}",
                path.display(),
                ck.format_version
            )));
        }
        if ck.stage != stage {
            return Err(Error::Stage {
                path: path.to_path_buf(),
                expected: stage.to_string(),
                found: ck.stage.to_string(),
            });
        }
        if ck.fingerprint != fingerprint {
            return Err(Error::Fingerprint {
                path: path.to_path_buf(),
                expected: fingerprint.to_string(),
                found: ck.fingerprint,
            });
        }
        Ok(ck)
    }
}
