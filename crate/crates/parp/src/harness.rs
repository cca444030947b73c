//! Experiment orchestration: configs with canonical digests, run records,
//! sparsity sweeps, transfer matrices, joint discovery, IOU reports, and
//! atomic on-disk persistence.

use crate::analytics::{iou_matrix, overlap_matrix, IOUMatrix};
use crate::ckpt::{load_store, save_store};
use crate::error::{Error, Result};
use crate::methods::{
    evaluate, finetune_dense, imp, joint_discover, mpi, omp, parp, parp_p, subnetwork_finetune,
    EvalRecord, JointMethod, MethodResult, StepRecord, TrainConfig, TrainLog,
};
use crate::nn::{Encoder, EncoderConfig};
use crate::pruning::{random_mask, Mask};
use crate::tasks::{
    gen_language_task, gen_pretrain_corpus, pretrain, Dataset, PretrainConfig, PretrainObjective,
    TaskSpec,
};
use crate::tensor::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Pretrain,
    Single,
    Sweep,
    TransferMatrix,
    Joint,
    IouReport,
    Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodId {
    Dense,
    Rp,
    Mpi,
    Omp,
    Imp,
    Parp,
    ParpP,
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MethodId::Dense => "dense",
            MethodId::Rp => "rp",
            MethodId::Mpi => "mpi",
            MethodId::Omp => "omp",
            MethodId::Imp => "imp",
            MethodId::Parp => "parp",
            MethodId::ParpP => "parp-p",
        };
        f.write_str(s)
    }
}

impl FromStr for MethodId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(MethodId::Dense),
            "rp" => Ok(MethodId::Rp),
            "mpi" => Ok(MethodId::Mpi),
            "omp" => Ok(MethodId::Omp),
            "imp" => Ok(MethodId::Imp),
            "parp" => Ok(MethodId::Parp),
            "parp-p" => Ok(MethodId::ParpP),
            other => Err(Error::config(format!("unknown method id {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    Frozen,
    Parp,
}

impl FromStr for TransferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(TransferMode::Frozen),
            "parp" => Ok(TransferMode::Parp),
            other => Err(Error::config(format!("unknown transfer mode {other:?}"))),
        }
    }
}

/// One experiment. The SHA-256 digest of its canonical JSON form (sorted
/// keys, output directory excluded) is the run identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub method: Option<MethodId>,
    pub tasks: Vec<TaskSpec>,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub start_sparsity: Option<f64>,
    pub transfer_mode: Option<TransferMode>,
    pub pretrain_objective: Option<PretrainObjective>,
    pub init_ckpt: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            kind,
            method: None,
            tasks: Vec::new(),
            train: TrainConfig::new(100, 0),
            encoder: EncoderConfig::new(16, 32, 2),
            sparsities: Vec::new(),
            seeds: vec![0],
            start_sparsity: None,
            transfer_mode: None,
            pretrain_objective: None,
            init_ckpt: None,
            out_dir: out_dir.into(),
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding, with the output
    /// directory removed so moving artifacts does not change identity.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        // serde_json maps are ordered; to_string is canonical for our types
        let bytes = serde_json::to_vec(&value).expect("canonical bytes");
        hex(&Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for &s in &self.sparsities {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(format!("sparsity {s} outside [0,1]")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        match self.kind {
            ExperimentKind::Pretrain => Ok(()),
            ExperimentKind::Single | ExperimentKind::Sweep | ExperimentKind::Ablation => {
                if self.tasks.is_empty() {
                    return Err(Error::config("tasks: at least one task is required"));
                }
                if matches!(self.kind, ExperimentKind::Single | ExperimentKind::Sweep)
                    && self.method.is_none()
                    && self.kind == ExperimentKind::Single
                {
                    return Err(Error::config("method: required for a single run"));
                }
                Ok(())
            }
            ExperimentKind::TransferMatrix | ExperimentKind::Joint | ExperimentKind::IouReport => {
                if self.tasks.len() < 2 {
                    return Err(Error::config("tasks: at least two tasks are required"));
                }
                Ok(())
            }
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Record of one completed method run. Immutable once written; the metric
/// traces are deterministic in the config digest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub digest: String,
    pub code_version: String,
    pub method: String,
    pub task: String,
    pub sparsity: f64,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_dev_loss: f64,
    pub final_dev_err: f64,
    pub final_test_loss: f64,
    pub final_test_err: f64,
    pub mask_paths: Vec<String>,
    pub mask_checksum: Option<String>,
    pub runs_consumed: usize,
    pub total_update_steps: usize,
    pub wall_time_s: f64,
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_record(record: &RunRecord, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(record)?;
    atomic_write(path, &bytes)
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::RecordParse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Recursively collect `*.record.json` under a directory (or accept a
/// single record file path).
pub fn collect_records(root: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    if root.is_file() {
        paths.push(root.to_path_buf());
    } else if root.is_dir() {
        walk(root, &mut paths)?;
    }
    paths.sort();
    paths.iter().map(|p| load_record(p)).collect()
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| {
            n.ends_with(".record.json")
        }) {
            out.push(path);
        }
    }
    Ok(())
}

/// CSV of the per-step and per-eval traces, byte-stable across reruns.
pub fn metrics_csv(log: &TrainLog) -> String {
    let mut s = String::from("kind,step,lr,loss,error_rate\n");
    for r in &log.steps {
        s.push_str(&format!("step,{},{},{},\n", r.step, fmt_f64(r.lr), fmt_f64(r.loss)));
    }
    for r in &log.evals {
        s.push_str(&format!(
            "eval,{},,{},{}\n",
            r.step,
            fmt_f64(r.loss),
            fmt_f64(r.error_rate)
        ));
    }
    s
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip formatting keeps CSVs byte-identical across runs
    format!("{v}")
}

pub fn mask_checksum(mask: &Mask) -> String {
    let mut h = Sha256::new();
    h.update(mask.layout_hash());
    for (name, bits) in mask.entries() {
        h.update(name.as_bytes());
        for chunk in bits.chunks(8) {
            let mut byte = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                byte |= (b as u8) << i;
            }
            h.update([byte]);
        }
    }
    hex(&h.finalize())
}

/// Outcome of one method application, before bookkeeping.
pub struct MethodRun {
    pub store: ParamStore,
    pub mask: Mask,
    pub log: TrainLog,
    pub snapshots: Vec<Mask>,
    pub runs_consumed: usize,
}

impl From<MethodResult> for MethodRun {
    fn from(r: MethodResult) -> Self {
        MethodRun {
            store: r.store,
            mask: r.mask,
            log: r.log,
            snapshots: r.snapshots,
            runs_consumed: r.runs_consumed,
        }
    }
}

/// Apply one named method at sparsity `s`, composed with subnetwork
/// finetuning where the protocol calls for it (RP/MPI/OMP/IMP produce a
/// mask first and then finetune the subnetwork; PARP variants finetune
/// while re-pruning).
pub fn run_method(
    enc: &Encoder,
    pretrained: &ParamStore,
    data: &Dataset,
    method: MethodId,
    s: f64,
    cfg: &TrainConfig,
    start_sparsity: Option<f64>,
) -> Result<MethodRun> {
    match method {
        MethodId::Dense => {
            let (store, log) = finetune_dense(enc, pretrained, data, cfg)?;
            Ok(MethodRun {
                store,
                mask: Mask::ones(pretrained),
                log,
                snapshots: Vec::new(),
                runs_consumed: 1,
            })
        }
        MethodId::Rp => {
            let mask = random_mask(pretrained, s, cfg.seed);
            let (store, log) = subnetwork_finetune(enc, pretrained, &mask, data, cfg)?;
            Ok(MethodRun { store, mask, log, snapshots: Vec::new(), runs_consumed: 1 })
        }
        MethodId::Mpi => {
            let mask = mpi(pretrained, s);
            let (store, log) = subnetwork_finetune(enc, pretrained, &mask, data, cfg)?;
            Ok(MethodRun { store, mask, log, snapshots: Vec::new(), runs_consumed: 1 })
        }
        MethodId::Omp => {
            let (mask, mut log) = omp(enc, pretrained, data, cfg, s)?;
            let (store, ft_log) = subnetwork_finetune(enc, pretrained, &mask, data, cfg)?;
            log.steps.extend(ft_log.steps);
            log.evals.extend(ft_log.evals);
            Ok(MethodRun { store, mask, log, snapshots: Vec::new(), runs_consumed: 2 })
        }
        MethodId::Imp => {
            let r = imp(enc, pretrained, data, cfg, s)?;
            let (store, ft_log) = subnetwork_finetune(enc, pretrained, &r.mask, data, cfg)?;
            let mut log = r.log;
            log.steps.extend(ft_log.steps);
            log.evals.extend(ft_log.evals);
            Ok(MethodRun {
                store,
                mask: r.mask,
                log,
                snapshots: r.snapshots,
                runs_consumed: r.runs_consumed + 1,
            })
        }
        MethodId::Parp => {
            let mut cfg = cfg.clone();
            cfg.target_sparsity = s;
            let initial = mpi(pretrained, s);
            Ok(parp(enc, pretrained, &initial, data, &cfg)?.into())
        }
        MethodId::ParpP => {
            let s0 = start_sparsity
                .ok_or_else(|| Error::config("start_sparsity: required for parp-p"))?;
            let mut cfg = cfg.clone();
            cfg.target_sparsity = s;
            Ok(parp_p(enc, pretrained, data, &cfg, s0)?.into())
        }
    }
}

fn build_encoder(cfg: &EncoderConfig, tasks: &[TaskSpec]) -> Encoder {
    let refs: Vec<&TaskSpec> = tasks.iter().collect();
    crate::methods::encoder_for_tasks(cfg.clone(), &refs)
}

/// Initial weights for an experiment: fresh deterministic init, with any
/// matching parameters overwritten from a checkpoint when one is given.
fn initial_store(enc: &Encoder, cfg: &ExperimentConfig, seed: u64) -> Result<ParamStore> {
    let mut store = enc.init_store(seed);
    if let Some(path) = &cfg.init_ckpt {
        let ckpt = load_store(path)?;
        for p in ckpt.iter() {
            if let Some(dst) = store.get_mut(&p.name) {
                if dst.value.shape() != p.value.shape() {
                    return Err(Error::config(format!(
                        "checkpoint parameter {} has shape {:?}, expected {:?}",
                        p.name,
                        p.value.shape(),
                        dst.value.shape()
                    )));
                }
                dst.value = p.value.clone();
            }
        }
    }
    Ok(store)
}

fn finalize_record(
    cfg: &ExperimentConfig,
    enc: &Encoder,
    data: &Dataset,
    method: MethodId,
    s: f64,
    seed: u64,
    run: &MethodRun,
    dir: &Path,
    wall_time_s: f64,
) -> Result<RunRecord> {
    let (dev_loss, dev_err) = evaluate(enc, &run.store, &data.dev, &data.spec.id, data.spec.flavor)?;
    let (test_loss, test_err) =
        evaluate(enc, &run.store, &data.test, &data.spec.id, data.spec.flavor)?;
    let tag = format!("{method}-{}-s{s}-seed{seed}", data.spec.id);
    let mask_path = dir.join(format!("{tag}.mask"));
    run.mask.save(&mask_path)?;
    atomic_write(&dir.join(format!("{tag}.metrics.csv")), metrics_csv(&run.log).as_bytes())?;
    let record = RunRecord {
        digest: cfg.digest(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        method: method.to_string(),
        task: data.spec.id.clone(),
        sparsity: s,
        seed,
        steps: run.log.steps.clone(),
        evals: run.log.evals.clone(),
        final_dev_loss: dev_loss,
        final_dev_err: dev_err,
        final_test_loss: test_loss,
        final_test_err: test_err,
        mask_paths: vec![mask_path.display().to_string()],
        mask_checksum: Some(mask_checksum(&run.mask)),
        runs_consumed: run.runs_consumed,
        total_update_steps: run.log.steps.len(),
        wall_time_s,
    };
    save_record(&record, &dir.join(format!("{tag}.record.json")))?;
    Ok(record)
}

/// Execute an experiment config and persist its artifacts under
/// `out_dir/<digest prefix>/`. Returns the child run records.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let digest = cfg.digest();
    let dir = cfg.out_dir.join(&digest[..16]);
    std::fs::create_dir_all(&dir)?;
    let config_bytes = serde_json::to_vec_pretty(cfg)?;
    atomic_write(&dir.join("config.json"), &config_bytes)?;

    match cfg.kind {
        ExperimentKind::Pretrain => run_pretrain(cfg, &dir),
        ExperimentKind::Single => {
            let method = cfg.method.ok_or_else(|| Error::config("method: required"))?;
            let s = cfg.sparsities.first().copied().unwrap_or(0.0);
            let mut records = Vec::new();
            for &seed in &cfg.seeds {
                records.push(run_single(cfg, method, &cfg.tasks[0], s, seed, &dir)?);
            }
            Ok(records)
        }
        ExperimentKind::Sweep => {
            let methods = match cfg.method {
                Some(m) => vec![m],
                None => vec![MethodId::Rp, MethodId::Mpi, MethodId::Omp, MethodId::Parp],
            };
            let sweep = sparsity_sweep(cfg, &methods, &cfg.tasks[0])?;
            atomic_write(&dir.join("sweep.csv"), sweep.to_csv().as_bytes())?;
            Ok(sweep.records)
        }
        ExperimentKind::TransferMatrix => {
            let mode = cfg.transfer_mode.unwrap_or(TransferMode::Frozen);
            let s = cfg.sparsities.first().copied().unwrap_or(0.5);
            let m = transfer_matrix(cfg, mode, s)?;
            atomic_write(&dir.join("transfer.csv"), m.to_csv().as_bytes())?;
            Ok(Vec::new())
        }
        ExperimentKind::Joint => {
            let s = cfg.sparsities.first().copied().unwrap_or(0.5);
            let method = match cfg.method {
                Some(MethodId::Omp) | None => JointMethod::Omp,
                Some(MethodId::Parp) => JointMethod::Parp,
                Some(other) => {
                    return Err(Error::config(format!(
                        "method: joint discovery supports omp or parp, got {other}"
                    )))
                }
            };
            run_joint(cfg, method, s, &dir)
        }
        ExperimentKind::IouReport => {
            let s = cfg.sparsities.first().copied().unwrap_or(0.5);
            let (iou, overlap) = iou_report_for_tasks(cfg, s)?;
            atomic_write(&dir.join("iou.csv"), iou.to_csv().as_bytes())?;
            atomic_write(&dir.join("overlap.csv"), overlap.to_csv().as_bytes())?;
            Ok(Vec::new())
        }
        ExperimentKind::Ablation => {
            let s = cfg.sparsities.first().copied().unwrap_or(0.5);
            let (a, b, _) = ablation_initial_mask(cfg, &cfg.tasks[0], s, &dir)?;
            Ok(vec![a, b])
        }
    }
}

fn run_pretrain(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<RunRecord>> {
    let objective = cfg.pretrain_objective.unwrap_or(PretrainObjective::MaskedRecon);
    let seed = cfg.seeds[0];
    let pcfg = PretrainConfig {
        steps: cfg.train.total_updates,
        peak_lr: cfg.train.peak_lr,
        seed,
        ..PretrainConfig::new(cfg.train.total_updates, seed)
    };
    let vocab = cfg.tasks.first().map_or(6, |t| t.vocab);
    let corpus = gen_pretrain_corpus(
        seed,
        200,
        cfg.encoder.input_dim,
        vocab,
        (8, 24),
        0.1,
    );
    let (store, trace) = pretrain(&cfg.encoder, &corpus, objective, &pcfg)?;
    save_store(&store, &dir.join("pretrained.ckpt"))?;
    let mut log = TrainLog::default();
    for (step, loss) in trace {
        log.steps.push(StepRecord { step, lr: pcfg.peak_lr, loss });
    }
    atomic_write(&dir.join("pretrain.metrics.csv"), metrics_csv(&log).as_bytes())?;
    let record = RunRecord {
        digest: cfg.digest(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        method: "pretrain".to_string(),
        task: "pretrain".to_string(),
        sparsity: 0.0,
        seed,
        steps: log.steps.clone(),
        evals: Vec::new(),
        final_dev_loss: log.steps.last().map_or(f64::NAN, |r| r.loss),
        final_dev_err: 0.0,
        final_test_loss: f64::NAN,
        final_test_err: 0.0,
        mask_paths: Vec::new(),
        mask_checksum: None,
        runs_consumed: 0,
        total_update_steps: log.steps.len(),
        wall_time_s: 0.0,
    };
    save_record(&record, &dir.join("pretrain.record.json"))?;
    Ok(vec![record])
}

fn run_single(
    cfg: &ExperimentConfig,
    method: MethodId,
    spec: &TaskSpec,
    s: f64,
    seed: u64,
    dir: &Path,
) -> Result<RunRecord> {
    let t0 = std::time::Instant::now();
    let enc = build_encoder(&cfg.encoder, &cfg.tasks);
    let pretrained = initial_store(&enc, cfg, seed)?;
    let data = gen_language_task(spec);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let run = run_method(&enc, &pretrained, &data, method, s, &tcfg, cfg.start_sparsity)?;
    finalize_record(cfg, &enc, &data, method, s, seed, &run, dir, t0.elapsed().as_secs_f64())
}

fn run_joint(
    cfg: &ExperimentConfig,
    method: JointMethod,
    s: f64,
    dir: &Path,
) -> Result<Vec<RunRecord>> {
    let enc = build_encoder(&cfg.encoder, &cfg.tasks);
    let seed = cfg.seeds[0];
    let pretrained = initial_store(&enc, cfg, seed)?;
    let datasets: Vec<Dataset> = cfg.tasks.iter().map(gen_language_task).collect();
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let r = joint_discover(&enc, &pretrained, &datasets, method, &tcfg, s)?;
    let mask_path = dir.join("joint.mask");
    r.mask.save(&mask_path)?;
    atomic_write(&dir.join("joint.metrics.csv"), metrics_csv(&r.log).as_bytes())?;
    let mut records = Vec::new();
    for (task, loss, err) in &r.per_task_eval {
        let record = RunRecord {
            digest: cfg.digest(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            method: format!("joint-{}", cfg.method.map_or("omp".to_string(), |m| m.to_string())),
            task: task.clone(),
            sparsity: s,
            seed,
            steps: Vec::new(),
            evals: Vec::new(),
            final_dev_loss: *loss,
            final_dev_err: *err,
            final_test_loss: f64::NAN,
            final_test_err: f64::NAN,
            mask_paths: vec![mask_path.display().to_string()],
            mask_checksum: Some(mask_checksum(&r.mask)),
            runs_consumed: r.runs_consumed,
            total_update_steps: r.log.steps.len(),
            wall_time_s: 0.0,
        };
        save_record(&record, &dir.join(format!("joint-{task}.record.json")))?;
        records.push(record);
    }
    Ok(records)
}

/// Sweep rows in long format, one per (method, sparsity, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub sparsity: f64,
    pub method: String,
    pub seed: u64,
    pub final_dev: f64,
    pub final_test: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub records: Vec<RunRecord>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sparsity,method,seed,final_dev,final_test\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(r.sparsity),
                r.method,
                r.seed,
                fmt_f64(r.final_dev),
                fmt_f64(r.final_test)
            ));
        }
        s
    }

    /// Mean final dev metric per (method, sparsity), averaged over seeds.
    pub fn mean_dev(&self, method: &str, sparsity: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.sparsity == sparsity)
            .map(|r| r.final_dev)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Run each method at each sparsity for each seed on one task.
pub fn sparsity_sweep(
    cfg: &ExperimentConfig,
    methods: &[MethodId],
    spec: &TaskSpec,
) -> Result<SweepResult> {
    let enc = build_encoder(&cfg.encoder, std::slice::from_ref(spec));
    let data = gen_language_task(spec);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let dir = cfg.out_dir.join(&cfg.digest()[..16]);
    std::fs::create_dir_all(&dir)?;
    for &method in methods {
        for &s in &cfg.sparsities {
            for &seed in &cfg.seeds {
                let pretrained = initial_store(&enc, cfg, seed)?;
                let mut tcfg = cfg.train.clone();
                tcfg.seed = seed;
                // s=0 anchors every method at the dense finetune result
                let effective = if s == 0.0 { MethodId::Dense } else { method };
                let run =
                    run_method(&enc, &pretrained, &data, effective, s, &tcfg, cfg.start_sparsity)?;
                let record = finalize_record(cfg, &enc, &data, method, s, seed, &run, &dir, 0.0)?;
                rows.push(SweepRow {
                    sparsity: s,
                    method: method.to_string(),
                    seed,
                    final_dev: record.final_dev_loss,
                    final_test: record.final_test_loss,
                });
                records.push(record);
            }
        }
    }
    Ok(SweepResult { rows, records })
}

/// Cross-task mask transfer. Entry (src, tgt) is the final dev loss of
/// finetuning tgt from src's OMP mask, minus the same-task diagonal.
/// The last row transfers a random mask, as a floor reference.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// deltas[i][j]: source i, target j, vs the (tgt, tgt) diagonal.
    pub deltas: Vec<Vec<f64>>,
    pub mode: TransferMode,
    pub sparsity: f64,
}

impl TransferMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source");
        for t in &self.targets {
            s.push(',');
            s.push_str(t);
        }
        s.push('\n');
        for (src, row) in self.sources.iter().zip(&self.deltas) {
            s.push_str(src);
            for v in row {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, src) in self.sources.iter().enumerate() {
            for (j, tgt) in self.targets.iter().enumerate() {
                if src != tgt && i < self.targets.len() {
                    sum += self.deltas[i][j];
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

pub fn transfer_matrix(
    cfg: &ExperimentConfig,
    mode: TransferMode,
    s: f64,
) -> Result<TransferMatrix> {
    cfg.validate()?;
    let enc = build_encoder(&cfg.encoder, &cfg.tasks);
    let seed = cfg.seeds[0];
    let pretrained = initial_store(&enc, cfg, seed)?;
    let datasets: Vec<Dataset> = cfg.tasks.iter().map(gen_language_task).collect();
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    tcfg.target_sparsity = s;

    let mut source_masks: Vec<(String, Mask)> = Vec::new();
    for data in &datasets {
        let (mask, _) = omp(&enc, &pretrained, data, &tcfg, s)?;
        source_masks.push((data.spec.id.clone(), mask));
    }
    source_masks.push(("rp".to_string(), random_mask(&pretrained, s, seed)));

    let finetune_with = |mask: &Mask, data: &Dataset| -> Result<f64> {
        let store = match mode {
            TransferMode::Frozen => subnetwork_finetune(&enc, &pretrained, mask, data, &tcfg)?.0,
            TransferMode::Parp => parp(&enc, &pretrained, mask, data, &tcfg)?.store,
        };
        Ok(evaluate(&enc, &store, &data.dev, &data.spec.id, data.spec.flavor)?.0)
    };

    let mut diag = Vec::with_capacity(datasets.len());
    for (j, data) in datasets.iter().enumerate() {
        diag.push(finetune_with(&source_masks[j].1, data)?);
    }
    let mut deltas = Vec::with_capacity(source_masks.len());
    let mut sources = Vec::with_capacity(source_masks.len());
    for (i, (src, mask)) in source_masks.iter().enumerate() {
        let mut row = Vec::with_capacity(datasets.len());
        for (j, data) in datasets.iter().enumerate() {
            if i == j {
                row.push(0.0); // diagonal is the reference point
            } else {
                row.push(finetune_with(mask, data)? - diag[j]);
            }
        }
        deltas.push(row);
        sources.push(src.clone());
    }
    Ok(TransferMatrix {
        sources,
        targets: datasets.iter().map(|d| d.spec.id.clone()).collect(),
        deltas,
        mode,
        sparsity: s,
    })
}

/// Per-task OMP masks plus an MPI row and an RP row, as IOU and overlap
/// matrices.
pub fn iou_report_for_tasks(cfg: &ExperimentConfig, s: f64) -> Result<(IOUMatrix, IOUMatrix)> {
    let enc = build_encoder(&cfg.encoder, &cfg.tasks);
    let seed = cfg.seeds[0];
    let pretrained = initial_store(&enc, cfg, seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let mut masks: Vec<(String, Mask)> = Vec::new();
    for spec in &cfg.tasks {
        let data = gen_language_task(spec);
        let (mask, _) = omp(&enc, &pretrained, &data, &tcfg, s)?;
        masks.push((spec.id.clone(), mask));
    }
    masks.push(("mpi".to_string(), mpi(&pretrained, s)));
    masks.push(("rp".to_string(), random_mask(&pretrained, s, seed)));
    iou_report(&masks)
}

pub fn iou_report(masks: &[(String, Mask)]) -> Result<(IOUMatrix, IOUMatrix)> {
    Ok((iou_matrix(masks)?, overlap_matrix(masks)?))
}

/// PARP started from an MPI mask vs from a random mask, same budget.
/// Returns both records and the final dev-loss delta (mpi minus rp).
pub fn ablation_initial_mask(
    cfg: &ExperimentConfig,
    spec: &TaskSpec,
    s: f64,
    dir: &Path,
) -> Result<(RunRecord, RunRecord, f64)> {
    let enc = build_encoder(&cfg.encoder, std::slice::from_ref(spec));
    let seed = cfg.seeds[0];
    let pretrained = initial_store(&enc, cfg, seed)?;
    let data = gen_language_task(spec);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    tcfg.target_sparsity = s;

    let record_for = |initial: &Mask, tag: &str| -> Result<RunRecord> {
        let run: MethodRun = parp(&enc, &pretrained, initial, &data, &tcfg)?.into();
        let mut record =
            finalize_record(cfg, &enc, &data, MethodId::Parp, s, seed, &run, dir, 0.0)?;
        record.method = format!("parp-from-{tag}");
        save_record(&record, &dir.join(format!("parp-from-{tag}.record.json")))?;
        Ok(record)
    };
    let a = record_for(&mpi(&pretrained, s), "mpi")?;
    let b = record_for(&random_mask(&pretrained, s, seed), "rp")?;
    let delta = a.final_dev_loss - b.final_dev_loss;
    Ok((a, b, delta))
}

/// Consolidated long-format table over a set of run records.
pub fn report_csv(records: &[RunRecord]) -> String {
    let mut s = String::from(
        "method,task,sparsity,seed,runs_consumed,total_update_steps,final_dev_loss,final_dev_err,final_test_loss,final_test_err\n",
    );
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.task,
            fmt_f64(r.sparsity),
            r.seed,
            r.runs_consumed,
            r.total_update_steps,
            fmt_f64(r.final_dev_loss),
            fmt_f64(r.final_dev_err),
            fmt_f64(r.final_test_loss),
            fmt_f64(r.final_test_err)
        ));
    }
    s
}
