//! Deterministic synthetic sequence data. A "task" is a dictionary of
//! per-symbol feature templates; sequences are runs of noisy templates.
//! Frame-classification labels are the per-frame template ids, CTC targets
//! are the run-length-collapsed id sequence. Everything is a pure function
//! of the spec, so datasets regenerate byte-identically.

use crate::error::Result;
use crate::loss::masked_recon_loss;
use crate::nn::{Encoder, EncoderConfig};
use crate::rng;
use crate::tensor::{ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    FrameClassification,
    CtcSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub flavor: Flavor,
    pub vocab: usize,
    pub dict_seed: u64,
    pub noise: f64,
    pub seq_len: (usize, usize),
    pub feat_dim: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Share `fraction` of the templates with a common base dictionary,
    /// creating related-task pairs: (base dictionary seed, fraction).
    pub shared_templates: Option<(u64, f64)>,
}

impl TaskSpec {
    pub fn new(id: &str, flavor: Flavor) -> Self {
        TaskSpec {
            id: id.to_string(),
            flavor,
            vocab: 6,
            dict_seed: 0,
            noise: 0.1,
            seq_len: (8, 24),
            feat_dim: 16,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            shared_templates: None,
        }
    }

    /// Output dim of this task's head: V classes, plus the blank for CTC.
    pub fn head_dim(&self) -> usize {
        match self.flavor {
            Flavor::FrameClassification => self.vocab,
            Flavor::CtcSequence => self.vocab + 1,
        }
    }

    pub fn templates(&self) -> Vec<Vec<f64>> {
        (0..self.vocab)
            .map(|v| {
                let mut t = vec![0.0; self.feat_dim];
                match self.shared_templates {
                    Some((base_seed, frac)) if (v as f64) < frac * self.vocab as f64 => {
                        let mut r = rng::stream(base_seed, &format!("shared-template/{v}"));
                        rng::fill_normal(&mut r, &mut t, 1.0);
                    }
                    _ => {
                        let mut r =
                            rng::stream(self.dict_seed, &format!("dict/{}/template/{v}", self.id));
                        rng::fill_normal(&mut r, &mut t, 1.0);
                    }
                }
                t
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub features: Tensor,
    pub frame_labels: Vec<usize>,
    /// Run-length-collapsed template ids (the CTC target, pre blank-shift).
    pub target: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub templates: Vec<Vec<f64>>,
    pub train: Vec<Sequence>,
    pub dev: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

pub fn collapse_runs(frame_labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for &l in frame_labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

fn gen_sequence(
    templates: &[Vec<f64>],
    noise: f64,
    seq_len: (usize, usize),
    r: &mut rand_chacha::ChaCha8Rng,
) -> Sequence {
    let feat_dim = templates[0].len();
    let t_len = r.gen_range(seq_len.0..=seq_len.1);
    let mut frame_labels = Vec::with_capacity(t_len);
    while frame_labels.len() < t_len {
        let sym = r.gen_range(0..templates.len());
        let run = r.gen_range(1..=3).min(t_len - frame_labels.len());
        for _ in 0..run {
            frame_labels.push(sym);
        }
    }
    let mut data = Vec::with_capacity(t_len * feat_dim);
    for &sym in &frame_labels {
        for &tv in &templates[sym] {
            data.push(tv + noise * rng::normal(r));
        }
    }
    let target = collapse_runs(&frame_labels);
    Sequence { features: Tensor::new(vec![t_len, feat_dim], data).unwrap(), frame_labels, target }
}

fn gen_split(spec: &TaskSpec, templates: &[Vec<f64>], split: &str, size: usize) -> Vec<Sequence> {
    (0..size)
        .map(|i| {
            let mut r = rng::stream(spec.dict_seed, &format!("data/{}/{split}/{i}", spec.id));
            gen_sequence(templates, spec.noise, spec.seq_len, &mut r)
        })
        .collect()
}

/// Generate the full labeled dataset for a task.
pub fn gen_language_task(spec: &TaskSpec) -> Dataset {
    let templates = spec.templates();
    Dataset {
        train: gen_split(spec, &templates, "train", spec.train_size),
        dev: gen_split(spec, &templates, "dev", spec.dev_size),
        test: gen_split(spec, &templates, "test", spec.test_size),
        templates,
        spec: spec.clone(),
    }
}

/// Unlabeled pretraining corpus drawn from a master template dictionary.
pub fn gen_pretrain_corpus(
    seed: u64,
    size: usize,
    feat_dim: usize,
    vocab: usize,
    seq_len: (usize, usize),
    noise: f64,
) -> Vec<Tensor> {
    let master = TaskSpec {
        id: "pretrain".to_string(),
        dict_seed: seed,
        feat_dim,
        vocab,
        noise,
        seq_len,
        ..TaskSpec::new("pretrain", Flavor::FrameClassification)
    };
    let templates = master.templates();
    (0..size)
        .map(|i| {
            let mut r = rng::stream(seed, &format!("pretrain-corpus/{i}"));
            gen_sequence(&templates, noise, seq_len, &mut r).features
        })
        .collect()
}

/// Checksum over a dataset's bytes, for byte-determinism checks.
pub fn dataset_checksum(data: &Dataset) -> [u8; 32] {
    let mut h = Sha256::new();
    for split in [&data.train, &data.dev, &data.test] {
        for seq in split.iter() {
            for v in seq.features.data() {
                h.update(v.to_le_bytes());
            }
            for &l in &seq.frame_labels {
                h.update((l as u64).to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainObjective {
    MaskedRecon,
    Contrastive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub seed: u64,
    /// Fraction of frames masked per sequence (masked-recon) or negatives
    /// per anchor (contrastive).
    pub mask_frac: f64,
    pub negatives: usize,
    pub temperature: f64,
}

impl PretrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        PretrainConfig {
            steps,
            batch_size: 8,
            peak_lr: 2e-3,
            seed,
            mask_frac: 0.3,
            negatives: 4,
            temperature: 0.5,
        }
    }
}

/// The head names pretraining attaches; stripped before finetuning.
pub fn pretrain_head(objective: PretrainObjective) -> &'static str {
    match objective {
        PretrainObjective::MaskedRecon => "recon",
        PretrainObjective::Contrastive => "proj",
    }
}

/// Pretrain an encoder on an unlabeled corpus with one of the two toy SSL
/// objectives. Returns the trained store (including the pretraining head)
/// and the per-step loss trace.
pub fn pretrain(
    cfg: &EncoderConfig,
    corpus: &[Tensor],
    objective: PretrainObjective,
    train: &PretrainConfig,
) -> Result<(ParamStore, Vec<(usize, f64)>)> {
    use crate::optim::{adam_step, AdamState, LRSchedule};

    let enc = match objective {
        PretrainObjective::MaskedRecon => {
            Encoder::new(cfg.clone()).with_head("recon", cfg.hidden_dim, cfg.input_dim)
        }
        PretrainObjective::Contrastive => {
            Encoder::new(cfg.clone()).with_head("proj", cfg.input_dim, cfg.hidden_dim)
        }
    };
    let mut store = enc.init_store(train.seed);
    if train.steps == 0 {
        return Ok((store, Vec::new()));
    }
    let mut adam = AdamState::new(&store);
    let sched = LRSchedule::new(train.peak_lr, train.steps);
    let mut r = rng::stream(train.seed, "pretrain-loop");
    let mut trace = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        store.zero_grads();
        let mut loss = 0.0;
        for _ in 0..train.batch_size {
            let seq = &corpus[r.gen_range(0..corpus.len())];
            loss += match objective {
                PretrainObjective::MaskedRecon => {
                    let t = seq.rows();
                    let n_mask = ((t as f64 * train.mask_frac).round() as usize).clamp(1, t);
                    let mut pos: Vec<usize> = (0..t).collect();
                    for i in 0..n_mask {
                        let j = i + r.gen_range(0..t - i);
                        pos.swap(i, j);
                    }
                    masked_recon_loss(&enc, &mut store, seq, &pos[..n_mask])?
                }
                PretrainObjective::Contrastive => {
                    contrastive_step(&enc, &mut store, seq, train, &mut r)?
                }
            };
        }
        loss /= train.batch_size as f64;
        // scale grads to the batch mean
        for p in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g /= train.batch_size as f64;
            }
        }
        adam_step(&mut store, &mut adam, sched.lr_at(step)?)?;
        trace.push((step, loss));
    }
    Ok((store, trace))
}

/// One contrastive example: mask a frame, encode, and score the encoder
/// output at that frame against projections of the true frame (positive)
/// and other frames (negatives).
fn contrastive_step(
    enc: &Encoder,
    store: &mut ParamStore,
    seq: &Tensor,
    train: &PretrainConfig,
    r: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    use crate::loss::contrastive_loss;

    let t = seq.rows();
    let f = seq.cols();
    let pos_idx = r.gen_range(0..t);
    let mut masked = seq.clone();
    masked.row_mut(pos_idx).iter_mut().for_each(|v| *v = 0.0);
    let cache = enc.forward(store, &masked)?;

    // stack the positive frame and K negative frames, project all at once
    let k = train.negatives;
    let mut frames = Tensor::zeros(vec![k + 1, f]);
    frames.row_mut(0).copy_from_slice(seq.row(pos_idx));
    let mut neg_rows = Vec::with_capacity(k);
    for i in 0..k {
        let mut j = r.gen_range(0..t);
        if t > 1 {
            while j == pos_idx {
                j = r.gen_range(0..t);
            }
        }
        neg_rows.push(j);
        frames.row_mut(i + 1).copy_from_slice(seq.row(j));
    }
    let proj = enc.head_forward(store, "proj", &frames)?;

    let anchor = cache.output.row(pos_idx).to_vec();
    let positive = proj.row(0).to_vec();
    let negatives: Vec<Vec<f64>> = (0..k).map(|i| proj.row(i + 1).to_vec()).collect();
    let (loss, d_anchor, d_pos, d_negs) =
        contrastive_loss(&anchor, &positive, &negatives, train.temperature)?;

    let mut d_proj = Tensor::zeros(vec![k + 1, proj.cols()]);
    d_proj.row_mut(0).copy_from_slice(&d_pos);
    for (i, dn) in d_negs.iter().enumerate() {
        d_proj.row_mut(i + 1).copy_from_slice(dn);
    }
    enc.head_backward(store, "proj", &frames, &d_proj);

    let mut d_emb = Tensor::zeros(vec![t, cache.output.cols()]);
    d_emb.row_mut(pos_idx).copy_from_slice(&d_anchor);
    enc.backward(store, &cache, &d_emb);
    Ok(loss)
}
