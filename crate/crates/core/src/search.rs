//! Alternating first-order bi-level search and stand-alone retraining.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{flip_horizontal, random_flips, Dataset, Normalizer};
use crate::discretize::{derive_genotype, one_hot_arch, Genotype};
use crate::error::{Error, Result};
use crate::ops::{Forward, NormMode};
use crate::optim::{cosine_lr, project_beta, Adam, AdamConfig, Sgd};
use crate::regularizers::{edge_loss, op_entropy_loss, total_loss, total_loss_var, EdgeGroup, LossReport, RegularizerConfig};
use crate::supernet::{ArchParams, CellType, SuperNetwork};
use crate::tensor::{Float, Tensor};

/// Seed offsets so that each random stream of a run is independent.
const ARCH_SEED: u64 = 0xa5c4;
const ARCH_BATCH_SEED: u64 = 0xb47c;

/// Everything that changes during a search.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub net: SuperNetwork,
    pub arch: ArchParams,
    pub sgd: Sgd,
    pub adam_alpha: Adam,
    pub adam_beta: Adam,
}

impl SearchState {
    pub fn new(net: SuperNetwork, arch: ArchParams, momentum: Float, weight_decay: Float, adam: AdamConfig) -> Self {
        let sgd = Sgd::new(net.theta.tensors(), momentum, weight_decay);
        let adam_alpha = Adam::new(&arch.alpha, adam);
        let adam_beta = Adam::new(&arch.beta, adam);
        SearchState { net, arch, sgd, adam_alpha, adam_beta }
    }
}

/// Hyperparameters of one search epoch.
#[derive(Clone, Debug)]
pub struct EpochPlan<'a> {
    pub epoch: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub lr0: Float,
    pub seed: u64,
    pub horizontal_flip: bool,
    pub regularizers: &'a RegularizerConfig,
    pub groups: &'a [EdgeGroup],
}

/// One completed optimization step.
pub struct StepRecord<'a> {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
    pub lr_theta: Float,
    pub lr_arch: Float,
    pub arch: &'a ArchParams,
    pub groups: &'a [EdgeGroup],
}

/// Architecture weights at the end of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub report: LossReport,
    /// Per cell type and edge: `softmax(alpha)`.
    pub alpha_softmax: Vec<Vec<Vec<Float>>>,
    /// Per cell type: `softmax(beta)` over each node's incoming edges.
    pub beta_softmax: Vec<Vec<Float>>,
    pub beta: Vec<Vec<Float>>,
}

impl EpochSnapshot {
    pub fn capture(epoch: usize, report: LossReport, arch: &ArchParams) -> Self {
        let e = arch.cell.num_edges();
        EpochSnapshot {
            epoch,
            report,
            alpha_softmax: (0..arch.cell_types.len()).map(|t| (0..e).map(|k| arch.alpha_softmax(t, k)).collect()).collect(),
            beta_softmax: (0..arch.cell_types.len()).map(|t| arch.beta_softmax(t)).collect(),
            beta: arch.beta.iter().map(|b| b.data().to_vec()).collect(),
        }
    }

    /// Fraction of edges whose largest operation weight is at least `level`.
    pub fn share_of_confident_edges(&self, level: Float) -> Float {
        let maxima: Vec<Float> =
            self.alpha_softmax.iter().flatten().map(|p| p.iter().copied().fold(0.0, Float::max)).collect();
        maxima.iter().filter(|&&m| m >= level).count() as Float / maxima.len().max(1) as Float
    }

    pub fn mean_op_entropy(&self) -> Float {
        let edges: Vec<&Vec<Float>> = self.alpha_softmax.iter().flatten().collect();
        edges.iter().map(|p| crate::regularizers::entropy(p)).sum::<Float>() / edges.len().max(1) as Float
    }
}

/// Callbacks during a search. Both default to doing nothing.
pub trait SearchObserver {
    fn on_step(&mut self, _record: &StepRecord<'_>) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _snapshot: &EpochSnapshot) -> Result<()> {
        Ok(())
    }
}

impl SearchObserver for () {}

fn labelled_batch(images: &Tensor, flip: bool, plan: &EpochPlan<'_>, stream: u64, batch: usize) -> Tensor {
    if !flip {
        return images.clone();
    }
    let coins = random_flips(images.shape()[0], plan.seed ^ stream, plan.epoch, batch);
    flip_horizontal(images, &coins)
}

/// Cross-entropy on one batch with the architecture held fixed; returns the
/// loss value and the weight gradients.
fn theta_gradients(state: &SearchState, images: &Tensor, labels: &[usize]) -> Result<(Float, Vec<Tensor>)> {
    let mut fwd = Forward::new(&state.net.theta, true, NormMode::Batch)?;
    let x = fwd.graph.constant(images.clone())?;
    let (logits, _) = state.net.forward(&mut fwd, &state.arch, false, x)?;
    let loss = fwd.graph.softmax_cross_entropy(logits, labels)?;
    let mut grads = fwd.graph.gradients(loss)?;
    let value = fwd.graph.value(loss).item();
    let theta = fwd.theta_vars().iter().map(|&v| grads.take(v).expect("weight leaf")).collect();
    Ok((value, theta))
}

/// Full objective on one batch with the weights held fixed; returns the
/// report and the `alpha` and `beta` gradients.
fn arch_gradients(
    state: &SearchState,
    images: &Tensor,
    labels: &[usize],
    plan: &EpochPlan<'_>,
) -> Result<(LossReport, Vec<Tensor>, Vec<Tensor>)> {
    let lambdas = plan.regularizers.lambdas(plan.epoch, plan.total_epochs)?;
    let mut fwd = Forward::new(&state.net.theta, false, NormMode::Batch)?;
    let x = fwd.graph.constant(images.clone())?;
    let (logits, vars) = state.net.forward(&mut fwd, &state.arch, true, x)?;
    let vars = vars.ok_or_else(|| Error::contract("architecture search needs a continuous architecture"))?;
    let g = &mut fwd.graph;
    let l_c = g.softmax_cross_entropy(logits, labels)?;
    let l_o = op_entropy_loss(g, &vars.alpha)?;
    let l_e = edge_loss(g, &vars.beta, state.arch.cell, plan.groups)?;
    let total = total_loss_var(g, l_c, l_o, l_e.total, lambdas)?;
    let report = total_loss(
        g.value(l_c).item(),
        g.value(l_o).item(),
        (g.value(l_e.entropy).item(), g.value(l_e.cardinality).item()),
        lambdas,
    );
    let mut grads = g.gradients(total)?;
    let alpha = vars.alpha.iter().map(|&v| grads.take(v).expect("alpha leaf")).collect();
    let beta = vars.beta.iter().map(|&v| grads.take(v).expect("beta leaf")).collect();
    Ok((report, alpha, beta))
}

/// One pass over both splits: per batch pair a weight step on the
/// classification loss, then an architecture step on the full objective,
/// then the `beta <= 1` projection.
pub fn search_epoch(
    state: &mut SearchState,
    weight_split: &Dataset,
    arch_split: &Dataset,
    plan: &EpochPlan<'_>,
    observer: &mut dyn SearchObserver,
) -> Result<Vec<LossReport>> {
    if weight_split.is_empty() || arch_split.is_empty() {
        return Err(Error::contract("both data splits must be nonempty"));
    }
    let lr = cosine_lr(plan.epoch, plan.total_epochs, plan.lr0)?;
    let w_batches = weight_split.batches(plan.batch_size, plan.seed, plan.epoch)?;
    let a_batches = arch_split.batches(plan.batch_size, plan.seed ^ ARCH_BATCH_SEED, plan.epoch)?;
    let mut reports = Vec::with_capacity(w_batches.len());
    for (step, (wb, ab)) in w_batches.iter().zip(&a_batches).enumerate() {
        let context = format!("epoch {} batch {step}", plan.epoch);
        let w_images = labelled_batch(&wb.images, plan.horizontal_flip, plan, 0, step);
        let (_, grads) = theta_gradients(state, &w_images, &wb.labels).map_err(|e| e.with_context(&context))?;
        state.sgd.step(state.net.theta.tensors_mut(), &grads, lr)?;

        let a_images = labelled_batch(&ab.images, plan.horizontal_flip, plan, ARCH_BATCH_SEED, step);
        let (report, ga, gb) =
            arch_gradients(state, &a_images, &ab.labels, plan).map_err(|e| e.with_context(&context))?;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!("{context}: objective is {}", report.total)));
        }
        state.adam_alpha.step(&mut state.arch.alpha, &ga)?;
        state.adam_beta.step(&mut state.arch.beta, &gb)?;
        project_beta(&mut state.arch.beta);

        observer.on_step(&StepRecord {
            epoch: plan.epoch,
            step,
            report,
            lr_theta: lr,
            lr_arch: state.adam_alpha.config.lr,
            arch: &state.arch,
            groups: plan.groups,
        })?;
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub net: SuperNetwork,
    pub arch: ArchParams,
    pub reports: Vec<LossReport>,
    pub snapshots: Vec<EpochSnapshot>,
    pub genotype: Genotype,
    pub normalizer: Normalizer,
}

/// Training and test data, standardized with statistics of the training set.
pub fn prepared_data(config: &RunConfig) -> Result<(Dataset, Dataset, Normalizer)> {
    let (train, test) = config.load_data()?;
    let normalizer = Normalizer::fit(&train);
    Ok((normalizer.apply(&train), normalizer.apply(&test), normalizer))
}

pub fn run_search(config: &RunConfig, observer: &mut dyn SearchObserver) -> Result<SearchResult> {
    config.validate()?;
    let groups = config.groups()?;
    let spec = config.network_spec()?;
    let (train, _, normalizer) = prepared_data(config)?;
    let (weight_split, arch_split) = crate::data::split(&train, config.search.split_fraction, config.seed)?;

    let net = SuperNetwork::new(spec.clone(), config.seed)?;
    let arch = ArchParams::init(net.cell, &spec.cell_types(), config.seed ^ ARCH_SEED);
    let s = &config.search;
    let mut state = SearchState::new(net, arch, s.momentum, s.weight_decay, s.adam());

    let mut reports = Vec::with_capacity(s.epochs);
    let mut snapshots = Vec::with_capacity(s.epochs);
    for epoch in 0..s.epochs {
        let plan = EpochPlan {
            epoch,
            total_epochs: s.epochs,
            batch_size: s.batch_size,
            lr0: s.lr0,
            seed: config.seed,
            horizontal_flip: config.task.horizontal_flip,
            regularizers: &config.regularizers,
            groups: &groups,
        };
        let steps = search_epoch(&mut state, &weight_split, &arch_split, &plan, observer)?;
        let mean = LossReport::mean(&steps);
        let snapshot = EpochSnapshot::capture(epoch, mean, &state.arch);
        observer.on_epoch(&snapshot)?;
        log::info!(
            "epoch {epoch}: L_C {:.4} L_O {:.4} L_E {:.4} total {:.4}",
            mean.l_c,
            mean.l_o,
            mean.l_e,
            mean.total
        );
        reports.push(mean);
        snapshots.push(snapshot);
    }
    let genotype = derive_genotype(&state.arch, &groups)?;
    Ok(SearchResult { net: state.net, arch: state.arch, reports, snapshots, genotype, normalizer })
}

/// Outcome of training a discrete architecture from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub epochs: usize,
    pub parameters: usize,
    pub train_loss: Vec<Float>,
    /// Percent, on the test set.
    pub accuracy: Float,
}

/// Trains the network described by `genotype` on the whole training set with
/// SGD and the cosine schedule, then evaluates it with population statistics
/// of the training set.
pub fn train_subnetwork(genotype: &Genotype, config: &RunConfig, epochs: usize) -> Result<RetrainReport> {
    config.validate()?;
    let spec = config.network_spec()?;
    let (train, test, _) = prepared_data(config)?;
    let mut net = SuperNetwork::from_genotype(spec.clone(), genotype, config.seed)?;
    let arch = one_hot_arch(&ArchParams::uniform(net.cell, &spec.cell_types()), genotype)?;
    let s = &config.search;
    let mut sgd = Sgd::new(net.theta.tensors(), s.momentum, s.weight_decay);
    let mut train_loss = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, s.lr0)?;
        let mut total = 0.0;
        let batches = train.batches(s.batch_size, config.seed, epoch)?;
        for (step, batch) in batches.iter().enumerate() {
            let images = if config.task.horizontal_flip {
                flip_horizontal(&batch.images, &random_flips(batch.labels.len(), config.seed, epoch, step))
            } else {
                batch.images.clone()
            };
            let mut fwd = Forward::new(&net.theta, true, NormMode::Batch)?;
            let x = fwd.graph.constant(images)?;
            let (logits, _) = net.forward(&mut fwd, &arch, false, x)?;
            let loss = fwd.graph.softmax_cross_entropy(logits, &batch.labels)?;
            let mut grads = fwd.graph.gradients(loss)?;
            let value = fwd.graph.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("retrain epoch {epoch} batch {step}: loss is {value}")));
            }
            total += value;
            let grads: Vec<Tensor> = fwd.theta_vars().iter().map(|&v| grads.take(v).expect("weight leaf")).collect();
            sgd.step(net.theta.tensors_mut(), &grads, lr)?;
        }
        train_loss.push(total / batches.len() as Float);
    }
    let stats = net.capture_stats(&arch, &train.images, s.batch_size)?;
    let accuracy = net.accuracy(&arch, &stats, &test.images, &test.labels, s.batch_size)?;
    Ok(RetrainReport { epochs, parameters: net.num_params(), train_loss, accuracy })
}

/// Cell types present in a run's architecture.
pub fn cell_types(config: &RunConfig) -> Result<Vec<CellType>> {
    Ok(config.network_spec()?.cell_types())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::{ScheduleKind, ScheduleSpec};

    fn tiny() -> RunConfig {
        let mut c = RunConfig::toy();
        c.task.train_count = 40;
        c.task.test_count = 20;
        c.task.height = 8;
        c.task.width = 8;
        c.network.channels = 2;
        c.search.epochs = 2;
        c.search.batch_size = 10;
        c.search.retrain_epochs = 1;
        c
    }

    #[test]
    fn search_is_deterministic_and_finite() {
        let c = tiny();
        let a = run_search(&c, &mut ()).unwrap();
        let b = run_search(&c, &mut ()).unwrap();
        assert_eq!(a.genotype, b.genotype);
        assert_eq!(a.arch, b.arch);
        assert_eq!(a.snapshots.len(), 2);
        assert!(a.reports.iter().all(|r| r.total.is_finite()));
        assert!(a.arch.max_beta() <= 1.0);
        assert_eq!(a.genotype.kept_edge_count(CellType::Normal), 8);
    }

    #[test]
    fn zero_control_leaves_plain_objective() {
        let mut c = tiny();
        c.regularizers.lambda_c = ScheduleSpec::off();
        let r = run_search(&c, &mut ()).unwrap();
        for rep in &r.reports {
            assert_eq!(rep.total, rep.l_c);
        }
    }

    #[test]
    fn weight_step_ignores_regularizers() {
        // the same weight update must result whatever the control functions are
        let c = tiny();
        let (train, _, _) = prepared_data(&c).unwrap();
        let spec = c.network_spec().unwrap();
        let net = SuperNetwork::new(spec.clone(), 0).unwrap();
        let arch = ArchParams::init(net.cell, &spec.cell_types(), 1);
        let state = SearchState::new(net, arch, 0.9, 3e-4, AdamConfig::default());
        let batch = &train.batches(10, 0, 0).unwrap()[0];
        let (loss, grads) = theta_gradients(&state, &batch.images, &batch.labels).unwrap();
        let groups = c.groups().unwrap();
        let strong = RegularizerConfig {
            lambda_c: ScheduleSpec::new(ScheduleKind::Const),
            lambda_1: ScheduleSpec::new(ScheduleKind::Const),
            lambda_2: ScheduleSpec::new(ScheduleKind::Const),
            beta_multiplier: 4.0,
        };
        let plan = EpochPlan {
            epoch: 1,
            total_epochs: 2,
            batch_size: 10,
            lr0: 0.25,
            seed: 0,
            horizontal_flip: false,
            regularizers: &strong,
            groups: &groups,
        };
        let (report, _, _) = arch_gradients(&state, &batch.images, &batch.labels, &plan).unwrap();
        assert!((report.l_c - loss).abs() < 1e-12);
        assert!(report.total > report.l_c);
        let again = theta_gradients(&state, &batch.images, &batch.labels).unwrap().1;
        assert_eq!(grads, again);
    }

    #[test]
    fn zero_epoch_retrain_runs() {
        let c = tiny();
        let r = run_search(&c, &mut ()).unwrap();
        let report = train_subnetwork(&r.genotype, &c, 0).unwrap();
        assert!(report.train_loss.is_empty());
        assert!((0.0..=100.0).contains(&report.accuracy));
        assert_eq!(train_subnetwork(&r.genotype, &c, 1).unwrap(), train_subnetwork(&r.genotype, &c, 1).unwrap());
    }
}
