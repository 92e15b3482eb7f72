//! Per-frame scores for a (video, question) pair.
//!
//! * question-frame similarity: cosine between projected frame and question
//!   encodings, in `[-1, 1]`;
//! * question-frame matching: sigmoid of a perceptron over the fused pair, in `(0, 1)`;
//! * inter-frame distinctiveness: mean `1 - cos` distance of a frame to every
//!   other frame of the same video, in `[0, 2]`;
//! * aggregate: the raw sum of the three.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParameterStore, Shape, Tensor};
use crate::error::{Error, Result};

/// Rows with a smaller norm are rejected as degenerate.
pub const MIN_ROW_NORM: f64 = 1e-9;

/// Per-frame visual embeddings of one video, rows in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    embeddings: Tensor,
    pub video_id: String,
}

impl FrameSet {
    pub fn new(video_id: impl Into<String>, embeddings: Tensor) -> Result<Self> {
        let video_id = video_id.into();
        let what = || format!("frames of {video_id}");
        let Shape::Matrix(m, d) = embeddings.shape() else {
            return Err(Error::Validation {
                what: what(),
                detail: format!("expected a matrix, got {}", embeddings.shape()),
            });
        };
        if m == 0 || d == 0 {
            return Err(Error::Validation {
                what: what(),
                detail: "need at least one frame of positive dimension".into(),
            });
        }
        for i in 0..m {
            let row = embeddings.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation {
                    what: what(),
                    detail: format!("non-finite value in row {i}"),
                });
            }
            if crate::autodiff::Tensor::vector(row.to_vec()).norm() <= MIN_ROW_NORM {
                return Err(Error::Validation {
                    what: what(),
                    detail: format!("row {i} has (near-)zero norm"),
                });
            }
        }
        Ok(FrameSet {
            embeddings,
            video_id,
        })
    }

    pub fn from_rows(video_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Validation {
                what: "frame rows".into(),
                detail: "ragged rows".into(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        FrameSet::new(video_id, Tensor::matrix(rows.len(), d, data))
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionEmbedding {
    vector: Vec<f64>,
    pub question_id: String,
}

impl QuestionEmbedding {
    pub fn new(question_id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let question_id = question_id.into();
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation {
                what: format!("question {question_id}"),
                detail: "empty or non-finite embedding".into(),
            });
        }
        if Tensor::vector(vector.clone()).norm() <= MIN_ROW_NORM {
            return Err(Error::Validation {
                what: format!("question {question_id}"),
                detail: "(near-)zero norm".into(),
            });
        }
        Ok(QuestionEmbedding {
            vector,
            question_id,
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerDims {
    pub d_v: usize,
    pub d_t: usize,
    pub d_h: usize,
    pub d_p: usize,
}

impl Default for ScorerDims {
    fn default() -> Self {
        ScorerDims {
            d_v: 64,
            d_t: 32,
            d_h: 64,
            d_p: 32,
        }
    }
}

/// Which scoring mechanisms contribute to the aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mechanisms {
    pub qfs: bool,
    pub qfm: bool,
    pub ifd: bool,
}

impl Default for Mechanisms {
    fn default() -> Self {
        Mechanisms::ALL
    }
}

impl Mechanisms {
    pub const ALL: Mechanisms = Mechanisms {
        qfs: true,
        qfm: true,
        ifd: true,
    };

    /// Parses an ablation list such as `"qfs,ifd"`: the named mechanisms are switched off.
    pub fn with_ablated(list: &str) -> Result<Self> {
        let mut m = Mechanisms::ALL;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "qfs" => m.qfs = false,
                "qfm" => m.qfm = false,
                "ifd" => m.ifd = false,
                other => return Err(Error::contract(format!("unknown mechanism {other}"))),
            }
        }
        Ok(m)
    }

    pub fn any(&self) -> bool {
        self.qfs || self.qfm || self.ifd
    }

    pub fn check(&self) -> Result<()> {
        if self.any() {
            Ok(())
        } else {
            Err(Error::contract("empty scorer: every mechanism is ablated"))
        }
    }
}

/// Parameter handles of the frame scorer inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScorerParams {
    pub dims: ScorerDims,
    /// Frame feature extractor, `d_h x d_v` and bias.
    pub extract_w: ParamId,
    pub extract_b: ParamId,
    /// Question encoder, `d_h x d_t` and bias.
    pub text_w: ParamId,
    pub text_b: ParamId,
    /// Low-dimensional projections compared by cosine, `d_p x d_h`.
    pub proj_frame: ParamId,
    pub proj_question: ParamId,
    /// Fusion perceptron `(3 d_h) -> d_h -> 1`.
    pub fusion_w1: ParamId,
    pub fusion_b1: ParamId,
    pub fusion_w2: ParamId,
    pub fusion_b2: ParamId,
}

impl ScorerParams {
    pub const PREFIX: &'static str = "scorer.";

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        dims: ScorerDims,
        rng: &mut R,
    ) -> Result<Self> {
        let ScorerDims { d_v, d_t, d_h, d_p } = dims;
        let mut mat = |name: &str, r: usize, c: usize, rng: &mut R| {
            store.insert(format!("{}{name}", Self::PREFIX), lecun_matrix(r, c, rng))
        };
        let extract_w = mat("extract_w", d_h, d_v, rng)?;
        let text_w = mat("text_w", d_h, d_t, rng)?;
        let proj_frame = mat("proj_frame", d_p, d_h, rng)?;
        let proj_question = mat("proj_question", d_p, d_h, rng)?;
        let fusion_w1 = mat("fusion_w1", d_h, 3 * d_h, rng)?;
        let fusion_w2 = store.insert(
            format!("{}fusion_w2", Self::PREFIX),
            Tensor::vector(lecun_matrix(1, d_h, rng).into_data()),
        )?;
        let zeros = |n| Tensor::vector(vec![0.0; n]);
        Ok(ScorerParams {
            dims,
            extract_w,
            extract_b: store.insert(format!("{}extract_b", Self::PREFIX), zeros(d_h))?,
            text_w,
            text_b: store.insert(format!("{}text_b", Self::PREFIX), zeros(d_h))?,
            proj_frame,
            proj_question,
            fusion_w1,
            fusion_b1: store.insert(format!("{}fusion_b1", Self::PREFIX), zeros(d_h))?,
            fusion_w2,
            fusion_b2: store.insert(format!("{}fusion_b2", Self::PREFIX), Tensor::scalar(0.0))?,
        })
    }

    /// Looks up previously stored scorer parameters by name.
    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        let id = |n: &str| {
            store
                .id(&format!("{}{n}", Self::PREFIX))
                .ok_or_else(|| Error::contract(format!("missing parameter {}{n}", Self::PREFIX)))
        };
        let extract_w = id("extract_w")?;
        let text_w = id("text_w")?;
        let proj_frame = id("proj_frame")?;
        let (d_h, d_v) = matrix_dims(store, extract_w)?;
        let (_, d_t) = matrix_dims(store, text_w)?;
        let (d_p, _) = matrix_dims(store, proj_frame)?;
        let p = ScorerParams {
            dims: ScorerDims { d_v, d_t, d_h, d_p },
            extract_w,
            extract_b: id("extract_b")?,
            text_w,
            text_b: id("text_b")?,
            proj_frame,
            proj_question: id("proj_question")?,
            fusion_w1: id("fusion_w1")?,
            fusion_b1: id("fusion_b1")?,
            fusion_w2: id("fusion_w2")?,
            fusion_b2: id("fusion_b2")?,
        };
        p.validate(store)?;
        Ok(p)
    }

    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.extract_w,
            self.extract_b,
            self.text_w,
            self.text_b,
            self.proj_frame,
            self.proj_question,
            self.fusion_w1,
            self.fusion_b1,
            self.fusion_w2,
            self.fusion_b2,
        ]
    }

    /// Parameters used by the similarity mechanism.
    pub fn qfs_ids(&self) -> [ParamId; 6] {
        [
            self.extract_w,
            self.extract_b,
            self.text_w,
            self.text_b,
            self.proj_frame,
            self.proj_question,
        ]
    }

    /// Parameters used by the matching mechanism.
    pub fn qfm_ids(&self) -> [ParamId; 8] {
        [
            self.extract_w,
            self.extract_b,
            self.text_w,
            self.text_b,
            self.fusion_w1,
            self.fusion_b1,
            self.fusion_w2,
            self.fusion_b2,
        ]
    }

    fn validate(&self, store: &ParameterStore) -> Result<()> {
        let ScorerDims { d_v, d_t, d_h, d_p } = self.dims;
        let expect = [
            (self.extract_w, Shape::Matrix(d_h, d_v)),
            (self.extract_b, Shape::Vector(d_h)),
            (self.text_w, Shape::Matrix(d_h, d_t)),
            (self.text_b, Shape::Vector(d_h)),
            (self.proj_frame, Shape::Matrix(d_p, d_h)),
            (self.proj_question, Shape::Matrix(d_p, d_h)),
            (self.fusion_w1, Shape::Matrix(d_h, 3 * d_h)),
            (self.fusion_b1, Shape::Vector(d_h)),
            (self.fusion_w2, Shape::Vector(d_h)),
            (self.fusion_b2, Shape::Scalar),
        ];
        for (id, shape) in expect {
            if store.shape(id) != shape {
                return Err(Error::Shape {
                    op: "scorer parameters",
                    left: store.shape(id),
                    right: shape,
                });
            }
        }
        Ok(())
    }

    /// Places the parameters on a graph once so several frames can share them.
    pub fn bind(&self, g: &mut Graph, store: &ParameterStore) -> BoundScorer {
        BoundScorer {
            dims: self.dims,
            extract_w: g.param(store, self.extract_w),
            extract_b: g.param(store, self.extract_b),
            text_w: g.param(store, self.text_w),
            text_b: g.param(store, self.text_b),
            proj_frame: g.param(store, self.proj_frame),
            proj_question: g.param(store, self.proj_question),
            fusion_w1: g.param(store, self.fusion_w1),
            fusion_b1: g.param(store, self.fusion_b1),
            fusion_w2: g.param(store, self.fusion_w2),
            fusion_b2: g.param(store, self.fusion_b2),
        }
    }
}

fn matrix_dims(store: &ParameterStore, id: ParamId) -> Result<(usize, usize)> {
    match store.shape(id) {
        Shape::Matrix(r, c) => Ok((r, c)),
        s => Err(Error::Shape {
            op: "scorer parameters",
            left: s,
            right: Shape::Matrix(0, 0),
        }),
    }
}

pub(crate) fn lecun_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let std = (1.0 / cols as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Scorer parameters as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct BoundScorer {
    pub dims: ScorerDims,
    pub extract_w: NodeId,
    pub extract_b: NodeId,
    pub text_w: NodeId,
    pub text_b: NodeId,
    pub proj_frame: NodeId,
    pub proj_question: NodeId,
    pub fusion_w1: NodeId,
    pub fusion_b1: NodeId,
    pub fusion_w2: NodeId,
    pub fusion_b2: NodeId,
}

/// Encoder outputs shared by the similarity and matching mechanisms.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `tanh(E_e h_i + b)` for each frame.
    pub frames: Vec<NodeId>,
    /// `tanh(E_t q + b)`.
    pub question: NodeId,
}

impl Encoded {
    pub fn new(
        g: &mut Graph,
        scorer: &BoundScorer,
        frames: &FrameSet,
        question: &QuestionEmbedding,
    ) -> Result<Self> {
        check_inputs(&scorer.dims, frames, question)?;
        let q = g.constant_vector(question.vector().to_vec());
        let question = g.affine_tanh(scorer.text_w, scorer.text_b, q)?;
        let frames = (0..frames.len())
            .map(|i| {
                let h = g.constant_vector(frames.row(i).to_vec());
                g.affine_tanh(scorer.extract_w, scorer.extract_b, h)
            })
            .collect::<Result<_>>()?;
        Ok(Encoded { frames, question })
    }
}

fn check_inputs(dims: &ScorerDims, frames: &FrameSet, question: &QuestionEmbedding) -> Result<()> {
    if frames.dim() != dims.d_v {
        return Err(Error::Shape {
            op: "frame encoder",
            left: Shape::Vector(frames.dim()),
            right: Shape::Vector(dims.d_v),
        });
    }
    if question.dim() != dims.d_t {
        return Err(Error::Shape {
            op: "question encoder",
            left: Shape::Vector(question.dim()),
            right: Shape::Vector(dims.d_t),
        });
    }
    Ok(())
}

/// `cos(W_e h_i^e, W_q h^q)` per frame.
pub fn qfs_scores(g: &mut Graph, scorer: &BoundScorer, enc: &Encoded) -> Result<Vec<NodeId>> {
    let pq = g.matvec(scorer.proj_question, enc.question)?;
    enc.frames
        .iter()
        .map(|&u| {
            let pf = g.matvec(scorer.proj_frame, u)?;
            g.cosine(pf, pq)
        })
        .collect()
}

/// `sigmoid(w2 . tanh(W1 [u; v; u*v] + b1) + b2)` per frame.
pub fn qfm_scores(g: &mut Graph, scorer: &BoundScorer, enc: &Encoded) -> Result<Vec<NodeId>> {
    let v = enc.question;
    enc.frames
        .iter()
        .map(|&u| {
            let uv = g.mul(u, v)?;
            let fused = g.concat(&[u, v, uv])?;
            let hidden = g.affine_tanh(scorer.fusion_w1, scorer.fusion_b1, fused)?;
            let logit = g.dot(scorer.fusion_w2, hidden)?;
            let logit = g.add(logit, scorer.fusion_b2)?;
            g.sigmoid(logit)
        })
        .collect()
}

/// Cosine similarity between L2-normalized frame rows; symmetric with unit diagonal.
pub fn pairwise_similarity(frames: &FrameSet) -> Tensor {
    let m = frames.len();
    let normed: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let row = frames.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut s = vec![0.0; m * m];
    for i in 0..m {
        s[i * m + i] = 1.0;
        for j in (i + 1)..m {
            let c = cosine(&normed[i], &normed[j]);
            s[i * m + j] = c;
            s[j * m + i] = c;
        }
    }
    Tensor::matrix(m, m, s)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean distinctiveness `1 - S(i, j)` over all other frames. A single frame scores 0.
pub fn ifd_values(frames: &FrameSet) -> Vec<f64> {
    let m = frames.len();
    if m < 2 {
        return vec![0.0; m];
    }
    let s = pairwise_similarity(frames);
    (0..m)
        .map(|i| {
            let total: f64 = (0..m).filter(|&j| j != i).map(|j| 1.0 - s.row(i)[j]).sum();
            total / (m - 1) as f64
        })
        .collect()
}

/// Distinctiveness scores as constant graph leaves (frames carry no parameters).
pub fn ifd_scores(g: &mut Graph, frames: &FrameSet) -> Vec<NodeId> {
    ifd_values(frames)
        .into_iter()
        .map(|v| g.constant_scalar(v))
        .collect()
}

/// Per-frame score nodes for one (video, question) pair.
#[derive(Debug, Clone)]
pub struct ScoreNodes {
    pub qfs: Vec<NodeId>,
    pub qfm: Vec<NodeId>,
    pub ifd: Vec<NodeId>,
    pub aggregate: Vec<NodeId>,
}

impl ScoreNodes {
    pub fn breakdown(&self, g: &Graph) -> ScoreBreakdown {
        let vals = |ids: &[NodeId]| ids.iter().map(|&i| g.scalar_value(i)).collect();
        ScoreBreakdown {
            qfs: vals(&self.qfs),
            qfm: vals(&self.qfm),
            ifd: vals(&self.ifd),
            aggregate: vals(&self.aggregate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub qfs: Vec<f64>,
    pub qfm: Vec<f64>,
    pub ifd: Vec<f64>,
    pub aggregate: Vec<f64>,
}

/// Per-frame `qfs + qfm + ifd` on the graph.
pub fn aggregate_scores(
    g: &mut Graph,
    qfs: &[NodeId],
    qfm: &[NodeId],
    ifd: &[NodeId],
) -> Result<Vec<NodeId>> {
    if qfs.len() != qfm.len() || qfs.len() != ifd.len() {
        return Err(Error::Shape {
            op: "aggregate_scores",
            left: Shape::Vector(qfs.len()),
            right: Shape::Vector(if qfs.len() != qfm.len() { qfm.len() } else { ifd.len() }),
        });
    }
    qfs.iter()
        .zip(qfm)
        .zip(ifd)
        .map(|((&a, &b), &c)| {
            let ab = g.add(a, b)?;
            g.add(ab, c)
        })
        .collect()
}

/// Builds all enabled mechanisms and their aggregate. Ablated mechanisms
/// contribute zero-valued constant leaves, so they carry no gradient.
pub fn score_frames(
    g: &mut Graph,
    store: &ParameterStore,
    params: &ScorerParams,
    frames: &FrameSet,
    question: &QuestionEmbedding,
    mechanisms: Mechanisms,
) -> Result<ScoreNodes> {
    mechanisms.check()?;
    check_inputs(&params.dims, frames, question)?;
    let m = frames.len();
    let zeros = |g: &mut Graph| (0..m).map(|_| g.constant_scalar(0.0)).collect::<Vec<_>>();

    let (qfs, qfm) = if mechanisms.qfs || mechanisms.qfm {
        let bound = params.bind(g, store);
        let enc = Encoded::new(g, &bound, frames, question)?;
        let qfs = if mechanisms.qfs {
            qfs_scores(g, &bound, &enc)?
        } else {
            zeros(g)
        };
        let qfm = if mechanisms.qfm {
            qfm_scores(g, &bound, &enc)?
        } else {
            zeros(g)
        };
        (qfs, qfm)
    } else {
        (zeros(g), zeros(g))
    };
    let ifd = if mechanisms.ifd {
        ifd_scores(g, frames)
    } else {
        zeros(g)
    };
    let aggregate = aggregate_scores(g, &qfs, &qfm, &ifd)?;
    Ok(ScoreNodes {
        qfs,
        qfm,
        ifd,
        aggregate,
    })
}
