use crate::data::EmbeddingClip;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Borrowed view of a mini-batch of clips.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub video: Vec<&'a Matrix>,
    /// `None` when any clip in the batch lacks audio.
    pub audio: Option<Vec<&'a Matrix>>,
    pub diagnosis: Vec<usize>,
    pub severity: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn from_clips(clips: &[&'a EmbeddingClip]) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let audio = clips
            .iter()
            .map(|c| c.audio.as_ref().map(|a| a.matrix()))
            .collect::<Option<Vec<_>>>();
        Ok(Batch {
            video: clips.iter().map(|c| c.video.matrix()).collect(),
            audio,
            diagnosis: clips.iter().map(|c| c.diagnosis).collect(),
            severity: clips.iter().map(|c| c.severity_level).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.video.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video.is_empty()
    }

    pub fn audio(&self) -> Result<&[&'a Matrix]> {
        self.audio
            .as_deref()
            .ok_or_else(|| Error::Config("batch contains clips without audio".into()))
    }
}
