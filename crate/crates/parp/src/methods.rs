//! The pruning-method family: MPI, OMP, IMP with rewinding, subnetwork
//! finetuning, PARP, PARP-P, and joint multi-task subnetwork discovery.
//!
//! All methods drive the same deterministic update loop; PARP-style
//! methods additionally interleave zero-out / re-prune events. The loop is
//! generic over an objective closure so the same machinery runs both real
//! task objectives and hand-constructed instances in tests.

use crate::error::{Error, Result};
use crate::loss::{ce_loss, ctc_greedy_decode, ctc_loss, log_softmax, log_softmax_backward};
use crate::nn::Encoder;
use crate::optim::{adam_step, AdamState, LRSchedule};
use crate::pruning::{global_magnitude_mask, Mask, SparsitySchedule};
use crate::rng;
use crate::tasks::{Dataset, Flavor, Sequence};
use crate::tensor::ParamStore;
use rand::Rng;
use serde::{Deserialize, Serialize};

const DIVERGE_LOSS: f64 = 1e6;
const DIVERGE_PATIENCE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_updates: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_ratio: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Re-prune interval n (PARP family).
    pub reprune_interval: usize,
    pub target_sparsity: f64,
    /// IMP rewind fraction r: 0 rewinds to the pretrained weights,
    /// r > 0 to the snapshot at step floor(r*N) of the first finetuning.
    pub rewind_frac: f64,
    /// IMP per-iteration prune fraction of remaining weights.
    pub prune_frac_per_iter: f64,
    /// Ablation flag: reset optimizer moments at every PARP re-prune
    /// event instead of carrying them through.
    pub reset_moments_on_reprune: bool,
    /// PARP-P: use a geometric keep-rate ramp instead of linear sparsity.
    pub geometric_schedule: bool,
}

impl TrainConfig {
    pub fn new(total_updates: usize, seed: u64) -> Self {
        TrainConfig {
            total_updates,
            batch_size: 8,
            peak_lr: 2e-3,
            floor_ratio: 0.01,
            seed,
            eval_interval: (total_updates / 10).max(1),
            reprune_interval: (total_updates / 20).max(1),
            target_sparsity: 0.5,
            rewind_frac: 0.0,
            prune_frac_per_iter: 0.1,
            reset_moments_on_reprune: false,
            geometric_schedule: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_updates == 0 {
            return Err(Error::config("total_updates must be positive"));
        }
        if self.reprune_interval == 0 || self.reprune_interval > self.total_updates {
            return Err(Error::config(format!(
                "reprune interval {} must be in [1, {}]",
                self.reprune_interval, self.total_updates
            )));
        }
        if !(0.0..1.0).contains(&self.prune_frac_per_iter) || self.prune_frac_per_iter == 0.0 {
            return Err(Error::config("prune fraction per iteration must be in (0,1)"));
        }
        if !(0.0..=1.0).contains(&self.rewind_frac) {
            return Err(Error::config("rewind fraction must be in [0,1]"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LRSchedule {
        LRSchedule {
            peak_lr: self.peak_lr,
            total_steps: self.total_updates,
            floor_ratio: self.floor_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    pub error_rate: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Result of one method invocation.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub store: ParamStore,
    pub mask: Mask,
    pub log: TrainLog,
    /// Mask snapshots at each re-prune event (PARP) or iteration (IMP).
    pub snapshots: Vec<Mask>,
    /// Finetuning runs consumed by this invocation alone.
    pub runs_consumed: usize,
}

pub type Objective<'a> = dyn FnMut(&mut ParamStore, usize) -> Result<f64> + 'a;
pub type EvalFn<'a> = dyn FnMut(&ParamStore) -> Result<(f64, f64)> + 'a;

struct LoopState {
    bad_steps: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_segment(
    store: &mut ParamStore,
    adam: &mut AdamState,
    sched: &LRSchedule,
    steps: std::ops::Range<usize>,
    objective: &mut Objective,
    freeze: Option<&Mask>,
    eval_interval: usize,
    eval: &mut Option<&mut EvalFn>,
    log: &mut TrainLog,
    state: &mut LoopState,
) -> Result<()> {
    if let Some(mask) = freeze {
        mask.enforce(store, Some(adam))?;
    }
    for step in steps {
        store.zero_grads();
        let loss = objective(store, step)?;
        if !loss.is_finite() || loss > DIVERGE_LOSS {
            state.bad_steps += 1;
            if state.bad_steps >= DIVERGE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {loss} for {DIVERGE_PATIENCE} consecutive steps"),
                });
            }
        } else {
            state.bad_steps = 0;
        }
        let lr = sched.lr_at(step)?;
        adam_step(store, adam, lr)?;
        if let Some(mask) = freeze {
            mask.enforce(store, Some(adam))?;
        }
        log.steps.push(StepRecord { step, lr, loss });
        if eval_interval > 0 && (step + 1) % eval_interval == 0 {
            if let Some(f) = eval.as_deref_mut() {
                let (l, e) = f(store)?;
                log.evals.push(EvalRecord { step, loss: l, error_rate: e });
            }
        }
    }
    Ok(())
}

/// Loss (and optionally scaled gradients) for one sequence under the
/// task's flavor. CTC labels are shifted by one so class 0 is the blank.
pub fn seq_loss(
    enc: &Encoder,
    store: &mut ParamStore,
    seq: &Sequence,
    head: &str,
    flavor: Flavor,
    grad_scale: Option<f64>,
) -> Result<f64> {
    let cache = enc.forward(store, &seq.features)?;
    let logits = enc.head_forward(store, head, &cache.output)?;
    let (loss, d_logits) = match flavor {
        Flavor::FrameClassification => ce_loss(&logits, &seq.frame_labels)?,
        Flavor::CtcSequence => {
            let lp = log_softmax(&logits);
            let target: Vec<usize> = seq.target.iter().map(|&l| l + 1).collect();
            let (loss, d_lp) = ctc_loss(&lp, &target, 0)?;
            (loss, log_softmax_backward(&lp, &d_lp))
        }
    };
    if let Some(scale) = grad_scale {
        let mut d = d_logits;
        for v in d.data_mut() {
            *v *= scale;
        }
        let d_emb = enc.head_backward(store, head, &cache.output, &d);
        enc.backward(store, &cache, &d_emb);
    }
    Ok(loss)
}

/// Mean loss and error rate over a split. Error rate is the frame error
/// rate for frame classification, greedy-decode label error rate for CTC.
pub fn evaluate(
    enc: &Encoder,
    store: &ParamStore,
    split: &[Sequence],
    head: &str,
    flavor: Flavor,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut err_num = 0.0;
    let mut err_den = 0.0;
    for seq in split {
        let cache = enc.forward(store, &seq.features)?;
        let logits = enc.head_forward(store, head, &cache.output)?;
        match flavor {
            Flavor::FrameClassification => {
                let (l, _) = ce_loss(&logits, &seq.frame_labels)?;
                loss += l;
                for (r, &lab) in seq.frame_labels.iter().enumerate() {
                    let row = logits.row(r);
                    let arg = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    err_num += (arg != lab) as usize as f64;
                    err_den += 1.0;
                }
            }
            Flavor::CtcSequence => {
                let lp = log_softmax(&logits);
                let target: Vec<usize> = seq.target.iter().map(|&l| l + 1).collect();
                let (l, _) = ctc_loss(&lp, &target, 0)?;
                loss += l;
                let decoded = ctc_greedy_decode(&lp, 0);
                err_num += levenshtein(&decoded, &target) as f64;
                err_den += target.len().max(1) as f64;
            }
        }
    }
    let n = split.len().max(1) as f64;
    Ok((loss / n, if err_den > 0.0 { err_num / err_den } else { 0.0 }))
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (x != y) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Deterministic batch stream: a fixed permutation of the training set,
/// indexed by global step so interleaved (joint) and solo runs see the
/// same per-step batches.
fn batch_order(data: &Dataset, seed: u64) -> Vec<usize> {
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &format!("batch-order/{}", data.spec.id));
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Build the per-step training objective for one task.
pub fn task_objective<'a>(
    enc: &'a Encoder,
    data: &'a Dataset,
    cfg: &TrainConfig,
) -> impl FnMut(&mut ParamStore, usize) -> Result<f64> + 'a {
    let order = batch_order(data, cfg.seed);
    let batch_size = cfg.batch_size;
    let head = data.spec.id.clone();
    let flavor = data.spec.flavor;
    move |store: &mut ParamStore, step: usize| {
        let mut loss = 0.0;
        let scale = 1.0 / batch_size as f64;
        for i in 0..batch_size {
            let idx = order[(step * batch_size + i) % order.len()];
            loss += seq_loss(enc, store, &data.train[idx], &head, flavor, Some(scale))?;
        }
        Ok(loss * scale)
    }
}

fn dev_eval<'a>(
    enc: &'a Encoder,
    data: &'a Dataset,
) -> impl FnMut(&ParamStore) -> Result<(f64, f64)> + 'a {
    move |store: &ParamStore| evaluate(enc, store, &data.dev, &data.spec.id, data.spec.flavor)
}

/// Magnitude pruning at the pretrained initialization: no finetuning.
pub fn mpi(pretrained: &ParamStore, s: f64) -> Mask {
    global_magnitude_mask(pretrained, s)
}

/// Plain dense finetuning for N updates. Optionally captures a weight
/// snapshot at a given step (for IMP rewinding).
fn finetune_with_snapshot(
    enc: &Encoder,
    pretrained: &ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    freeze: Option<&Mask>,
    snapshot_at: Option<usize>,
) -> Result<(ParamStore, TrainLog, Option<ParamStore>)> {
    let mut store = pretrained.clone();
    if cfg.total_updates == 0 {
        return Ok((store, TrainLog::default(), None));
    }
    cfg.validate()?;
    let mut adam = AdamState::new(&store);
    let sched = cfg.schedule();
    let mut log = TrainLog::default();
    let mut state = LoopState { bad_steps: 0 };
    let mut objective = task_objective(enc, data, cfg);
    let mut evalf = dev_eval(enc, data);
    let mut eval: Option<&mut EvalFn> = Some(&mut evalf);

    let mut snapshot = None;
    let cut = snapshot_at.unwrap_or(0).min(cfg.total_updates);
    if snapshot_at.is_some() && cut > 0 {
        run_segment(
            &mut store,
            &mut adam,
            &sched,
            0..cut,
            &mut objective,
            freeze,
            cfg.eval_interval,
            &mut eval,
            &mut log,
            &mut state,
        )?;
    }
    if snapshot_at.is_some() {
        snapshot = Some(store.clone());
    }
    run_segment(
        &mut store,
        &mut adam,
        &sched,
        cut * snapshot_at.is_some() as usize..cfg.total_updates,
        &mut objective,
        freeze,
        cfg.eval_interval,
        &mut eval,
        &mut log,
        &mut state,
    )?;
    Ok((store, log, snapshot))
}

/// Dense finetuning on the task: N optimizer updates under the tri-phase
/// schedule, deterministic in the seed.
pub fn finetune_dense(
    enc: &Encoder,
    pretrained: &ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainLog)> {
    let (store, log, _) = finetune_with_snapshot(enc, pretrained, data, cfg, None, None)?;
    Ok((store, log))
}

/// One-shot magnitude pruning: finetune dense, then prune the finetuned
/// weights. The mask is meant to be applied back at the pretrained
/// weights. Consumes one finetuning run for discovery.
pub fn omp(
    enc: &Encoder,
    pretrained: &ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    s: f64,
) -> Result<(Mask, TrainLog)> {
    if cfg.total_updates == 0 {
        return Ok((mpi(pretrained, s), TrainLog::default()));
    }
    let (finetuned, log) = finetune_dense(enc, pretrained, data, cfg)?;
    Ok((global_magnitude_mask(&finetuned, s), log))
}

/// Subnetwork finetuning: apply the mask at the pretrained weights and
/// train with masked weights pinned to zero the whole run.
pub fn subnetwork_finetune(
    enc: &Encoder,
    pretrained: &ParamStore,
    mask: &Mask,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainLog)> {
    mask.check_binding(pretrained)?;
    let mut start = pretrained.clone();
    mask.apply_zero(&mut start)?;
    let (store, log, _) = finetune_with_snapshot(enc, &start, data, cfg, Some(mask), None)?;
    Ok((store, log))
}

/// Number of IMP iterations to reach sparsity `s` pruning `rho` of the
/// remaining weights per iteration.
pub fn imp_iterations(s: f64, rho: f64) -> usize {
    (((1.0 - s).ln() / (1.0 - rho).ln()).ceil() as usize).max(1)
}

/// Iterative magnitude pruning with optional rewinding. Each iteration
/// restarts from the rewind point, finetunes with the current mask frozen,
/// and prunes a fraction of the remaining kept weights; the final
/// iteration clamps exactly to `s`. Returns the discovery-phase result;
/// runs_consumed counts iterations (the final subnetwork finetuning is a
/// separate, additional run).
pub fn imp(
    enc: &Encoder,
    pretrained: &ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    s: f64,
) -> Result<MethodResult> {
    cfg.validate()?;
    if !(0.0..1.0).contains(&s) || s == 0.0 {
        return Err(Error::config(format!("IMP target sparsity must be in (0,1), got {s}")));
    }
    let rho = cfg.prune_frac_per_iter;
    let iterations = imp_iterations(s, rho);
    let snapshot_step = (cfg.rewind_frac * cfg.total_updates as f64).floor() as usize;

    let mut rewind_point = pretrained.clone();
    let mut mask = Mask::ones(pretrained);
    let mut snapshots = Vec::with_capacity(iterations);
    let mut log = TrainLog::default();
    for k in 1..=iterations {
        let target_k = (1.0 - (1.0 - rho).powi(k as i32)).min(s);
        let target_k = if k == iterations { s } else { target_k };
        let freeze = if k == 1 { None } else { Some(&mask) };
        let want_snapshot = k == 1 && cfg.rewind_frac > 0.0;
        let mut start = rewind_point.clone();
        if freeze.is_some() {
            mask.apply_zero(&mut start)?;
        }
        let (finetuned, iter_log, snap) = finetune_with_snapshot(
            enc,
            &start,
            data,
            cfg,
            freeze,
            want_snapshot.then_some(snapshot_step),
        )?;
        if let Some(snap) = snap {
            rewind_point = snap;
        }
        mask = global_magnitude_mask(&finetuned, target_k);
        snapshots.push(mask.clone());
        log.steps.extend(iter_log.steps);
        log.evals.extend(iter_log.evals);
    }
    let mut store = pretrained.clone();
    mask.apply_zero(&mut store)?;
    Ok(MethodResult { store, mask, log, snapshots, runs_consumed: iterations })
}

/// PARP over an arbitrary objective: segments of `n` updates with zero-out
/// before each segment and a magnitude re-prune after, optimizer moments
/// carried across events unless configured otherwise. The initial mask is
/// applied before the first update; pruned weights are free to regrow
/// within each segment.
pub fn parp_core(
    pretrained: &ParamStore,
    initial_mask: &Mask,
    cfg: &TrainConfig,
    sparsities: &SparsitySchedule,
    objective: &mut Objective,
    mut eval: Option<&mut EvalFn>,
) -> Result<MethodResult> {
    cfg.validate()?;
    initial_mask.check_binding(pretrained)?;
    let n = cfg.reprune_interval;
    let events = cfg.total_updates.div_ceil(n);
    if sparsities.len() != events {
        return Err(Error::config(format!(
            "sparsity schedule has {} events, run has {events}",
            sparsities.len()
        )));
    }
    let mut store = pretrained.clone();
    let mut adam = AdamState::new(&store);
    let sched = cfg.schedule();
    let mut log = TrainLog::default();
    let mut state = LoopState { bad_steps: 0 };
    let mut mask = initial_mask.clone();
    let mut snapshots = Vec::with_capacity(events);
    for e in 0..events {
        mask.apply_zero(&mut store)?;
        let lo = e * n;
        let hi = ((e + 1) * n).min(cfg.total_updates);
        run_segment(
            &mut store,
            &mut adam,
            &sched,
            lo..hi,
            objective,
            None,
            cfg.eval_interval,
            &mut eval,
            &mut log,
            &mut state,
        )?;
        mask = global_magnitude_mask(&store, sparsities.at_event(e + 1));
        snapshots.push(mask.clone());
        if cfg.reset_moments_on_reprune {
            adam = AdamState::new(&store);
        }
    }
    mask.apply_zero(&mut store)?;
    Ok(MethodResult { store, mask, log, snapshots, runs_consumed: 1 })
}

/// Prune-adjust-re-prune on a task, starting from a given initial mask at
/// the target sparsity.
pub fn parp(
    enc: &Encoder,
    pretrained: &ParamStore,
    initial_mask: &Mask,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<MethodResult> {
    let events = cfg.total_updates.div_ceil(cfg.reprune_interval);
    let sched = SparsitySchedule::constant(cfg.target_sparsity, events);
    let mut objective = task_objective(enc, data, cfg);
    let mut evalf = dev_eval(enc, data);
    parp_core(pretrained, initial_mask, cfg, &sched, &mut objective, Some(&mut evalf))
}

/// Progressive PARP: start from an MPI mask at `s0` and ramp the re-prune
/// sparsity up to the target across the run's events.
pub fn parp_p(
    enc: &Encoder,
    pretrained: &ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    s0: f64,
) -> Result<MethodResult> {
    let s = cfg.target_sparsity;
    if s0 >= s {
        return Err(Error::config(format!("start sparsity {s0} must be below target {s}")));
    }
    let events = cfg.total_updates.div_ceil(cfg.reprune_interval);
    let sched = if cfg.geometric_schedule {
        SparsitySchedule::geometric(s0, s, events)
    } else {
        SparsitySchedule::linear(s0, s, events)
    };
    let initial = mpi(pretrained, s0);
    let mut objective = task_objective(enc, data, cfg);
    let mut evalf = dev_eval(enc, data);
    parp_core(pretrained, &initial, cfg, &sched, &mut objective, Some(&mut evalf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointMethod {
    Omp,
    Parp,
}

#[derive(Debug, Clone)]
pub struct JointResult {
    pub mask: Mask,
    pub store: ParamStore,
    pub log: TrainLog,
    /// Final (dev loss, dev error) of the shared subnetwork per task.
    pub per_task_eval: Vec<(String, f64, f64)>,
    pub runs_consumed: usize,
}

/// Round-robin objective over several tasks sharing the encoder, each
/// task owning its head. Step t trains task t mod K on batch index t of
/// that task's stream, so a single-task "joint" run is bit-identical to
/// the plain method.
fn joint_objective<'a>(
    enc: &'a Encoder,
    datasets: &'a [Dataset],
    cfg: &TrainConfig,
) -> impl FnMut(&mut ParamStore, usize) -> Result<f64> + 'a {
    let orders: Vec<Vec<usize>> = datasets.iter().map(|d| batch_order(d, cfg.seed)).collect();
    let batch_size = cfg.batch_size;
    move |store: &mut ParamStore, step: usize| {
        let k = step % datasets.len();
        let data = &datasets[k];
        let order = &orders[k];
        let mut loss = 0.0;
        let scale = 1.0 / batch_size as f64;
        for i in 0..batch_size {
            let idx = order[(step * batch_size + i) % order.len()];
            loss += seq_loss(enc, store, &data.train[idx], &data.spec.id, data.spec.flavor, Some(scale))?;
        }
        Ok(loss * scale)
    }
}

/// Discover one shared subnetwork for several tasks in a single
/// finetuning run over their interleaved union.
pub fn joint_discover(
    enc: &Encoder,
    pretrained: &ParamStore,
    datasets: &[Dataset],
    method: JointMethod,
    cfg: &TrainConfig,
    s: f64,
) -> Result<JointResult> {
    if datasets.is_empty() {
        return Err(Error::config("joint discovery needs at least one task"));
    }
    cfg.validate()?;
    let (mask, store, log, runs) = match method {
        JointMethod::Omp => {
            let mut store = pretrained.clone();
            let mut adam = AdamState::new(&store);
            let sched = cfg.schedule();
            let mut log = TrainLog::default();
            let mut state = LoopState { bad_steps: 0 };
            let mut objective = joint_objective(enc, datasets, cfg);
            run_segment(
                &mut store,
                &mut adam,
                &sched,
                0..cfg.total_updates,
                &mut objective,
                None,
                0,
                &mut None,
                &mut log,
                &mut state,
            )?;
            (global_magnitude_mask(&store, s), store, log, 1)
        }
        JointMethod::Parp => {
            let initial = mpi(pretrained, s);
            let events = cfg.total_updates.div_ceil(cfg.reprune_interval);
            let sched = SparsitySchedule::constant(s, events);
            let mut objective = joint_objective(enc, datasets, cfg);
            let r = parp_core(pretrained, &initial, cfg, &sched, &mut objective, None)?;
            (r.mask, r.store, r.log, r.runs_consumed)
        }
    };
    let mut per_task_eval = Vec::with_capacity(datasets.len());
    for data in datasets {
        let (l, e) = evaluate(enc, &store, &data.dev, &data.spec.id, data.spec.flavor)?;
        per_task_eval.push((data.spec.id.clone(), l, e));
    }
    Ok(JointResult { mask, store, log, per_task_eval, runs_consumed: runs })
}

/// Build the encoder (with per-task heads) for a set of tasks. Duplicate
/// task ids share a head.
pub fn encoder_for_tasks(cfg: crate::nn::EncoderConfig, specs: &[&crate::tasks::TaskSpec]) -> Encoder {
    let mut enc = Encoder::new(cfg);
    for spec in specs {
        enc = enc.with_task_head(&spec.id, spec.head_dim());
    }
    enc
}
