//! JSON manifest describing a VideoQA dataset stored as FSEB files.
//!
//! Paths inside a manifest are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fseb::{read_embeddings, write_atomic, write_embeddings};
use crate::autodiff::{Shape, Tensor};
use crate::bench::{dataset_hash, BenchConfig};
use crate::error::{Error, Result};
use crate::pipeline::VideoQAInstance;
use crate::scoring::{FrameSet, QuestionEmbedding};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// `M x d_v` frame embeddings.
    pub video: PathBuf,
    /// `1 x d_t` question embedding.
    pub question: PathBuf,
    /// One `1 x d_t` file per option.
    pub options: Vec<PathBuf>,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_keyframes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub d_v: usize,
    pub d_t: usize,
    pub instances: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<BenchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Validation {
                what: path.display().to_string(),
                detail: format!("unsupported manifest version {}", m.version),
            });
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

fn base_dir(manifest_path: &Path) -> &Path {
    manifest_path.parent().unwrap_or(Path::new("."))
}

fn load_row(path: &Path, d: usize) -> Result<Vec<f64>> {
    let t = read_embeddings(path)?;
    if t.shape() != Shape::Matrix(1, d) {
        return Err(Error::Validation {
            what: path.display().to_string(),
            detail: format!("expected a 1 x {d} matrix, found {}", t.shape()),
        });
    }
    Ok(t.into_data())
}

/// Reads a manifest and every file it references, checking dimensions.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<(Manifest, Vec<VideoQAInstance>)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let dir = base_dir(manifest_path);
    let mut out = Vec::with_capacity(manifest.instances.len());
    for e in &manifest.instances {
        let video_path = dir.join(&e.video);
        let frames = read_embeddings(&video_path)?;
        if frames.cols() != manifest.d_v {
            return Err(Error::Validation {
                what: video_path.display().to_string(),
                detail: format!("frame dimension {} differs from d_v = {}", frames.cols(), manifest.d_v),
            });
        }
        let question = load_row(&dir.join(&e.question), manifest.d_t)?;
        let options = e
            .options
            .iter()
            .map(|p| load_row(&dir.join(p), manifest.d_t))
            .collect::<Result<Vec<_>>>()?;
        let inst = VideoQAInstance {
            frames: FrameSet::new(e.id.clone(), frames)?,
            question: QuestionEmbedding::new(e.id.replace("video", "question"), question)?,
            options,
            answer_index: e.answer_index,
            planted_keyframes: e.planted_keyframes.clone(),
        };
        inst.validate()?;
        out.push(inst);
    }
    Ok((manifest, out))
}

/// Rounds every stored value to f32 precision, i.e. what a write/read cycle yields.
pub fn narrow_to_f32(inst: &VideoQAInstance) -> Result<VideoQAInstance> {
    let narrow = |v: &[f64]| v.iter().map(|&x| f64::from(x as f32)).collect::<Vec<_>>();
    let e = inst.frames.embeddings();
    Ok(VideoQAInstance {
        frames: FrameSet::new(
            inst.frames.video_id.clone(),
            Tensor::matrix(e.rows(), e.cols(), narrow(e.data())),
        )?,
        question: QuestionEmbedding::new(inst.question.question_id.clone(), narrow(inst.question.vector()))?,
        options: inst.options.iter().map(|o| narrow(o)).collect(),
        answer_index: inst.answer_index,
        planted_keyframes: inst.planted_keyframes.clone(),
    })
}

/// Writes every instance under `dir` and a `manifest.json` next to them.
/// The recorded hash is that of the data as it will read back. Returns the
/// manifest path.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    instances: &[VideoQAInstance],
    generator: Option<BenchConfig>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let first = instances
        .first()
        .ok_or_else(|| Error::contract("cannot write an empty dataset"))?;
    let (d_v, d_t) = (first.frames.dim(), first.question.dim());
    for sub in ["videos", "questions", "options"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let row = |v: &[f64]| Tensor::matrix(1, v.len(), v.to_vec());
    let mut entries = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        if inst.frames.dim() != d_v || inst.question.dim() != d_t {
            return Err(Error::Validation {
                what: inst.frames.video_id.clone(),
                detail: "dimensions differ from the first instance".into(),
            });
        }
        let video = PathBuf::from(format!("videos/{i:05}.fseb"));
        let question = PathBuf::from(format!("questions/{i:05}.fseb"));
        write_embeddings(inst.frames.embeddings(), dir.join(&video))?;
        write_embeddings(&row(inst.question.vector()), dir.join(&question))?;
        let options = inst
            .options
            .iter()
            .enumerate()
            .map(|(n, o)| {
                let p = PathBuf::from(format!("options/{i:05}-{n}.fseb"));
                write_embeddings(&row(o), dir.join(&p))?;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(ManifestEntry {
            id: inst.frames.video_id.clone(),
            video,
            question,
            options,
            answer_index: inst.answer_index,
            planted_keyframes: inst.planted_keyframes.clone(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        d_v,
        d_t,
        instances: entries,
        generator,
        dataset_hash: Some(dataset_hash(
            &instances.iter().map(narrow_to_f32).collect::<Result<Vec<_>>>()?,
        )),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
