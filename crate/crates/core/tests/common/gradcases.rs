// Finite-difference cases for every tape primitive and every loss term.
// Shared with the acceptance suite of the command-line crate.

#![allow(dead_code)]

use da2s::autodiff::{finite_difference_check, Graph, Role, Var};
use da2s::ops::{Forward, NormMode};
use da2s::regularizers::{edge_group_terms, edge_loss, op_entropy_loss, total_loss_var, EdgeGroup, GroupPreset, Lambdas};
use da2s::supernet::{ArchParams, CellSpec, CellType, NetworkSpec, SuperNetwork};
use da2s::{Float, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPSILON: Float = 1e-6;
pub const TOLERANCE: Float = 1e-4;
pub const INSTANCES: u64 = 20;

pub struct Case {
    pub name: &'static str,
    /// Worst relative error over the coordinates of one random instance.
    pub check: fn(u64) -> Result<Float>,
}

pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller; avoids depending on a distribution crate here.
            let u: Float = rng.random_range(1e-12..1.0);
            let v: Float = rng.random_range(0.0..1.0);
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI as Float * v).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Normal samples pushed at least `gap` away from zero, for inputs of kinked
/// primitives.
fn away_from_zero(shape: &[usize], gap: Float, rng: &mut ChaCha8Rng) -> Tensor {
    normal(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9c4d ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// `sum(f(x) * r)` for a fixed random `r`, so every output coordinate carries
/// a distinct weight.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone())?;
    let p = g.mul(y, rv)?;
    g.sum(p)
}

fn check_unary(seed: u64, x: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<Float> {
    let mut g = Graph::new();
    let probe = g.constant(x.clone())?;
    let y = f(&mut g, probe)?;
    let r = normal(g.shape(y), &mut rng(seed ^ 0xff));
    finite_difference_check(
        |g, x| {
            let y = f(g, x)?;
            project(g, y, &r)
        },
        &x,
        EPSILON,
    )
}

/// Checks `f(x, c)` in `x` with `c` held constant and then in `c` with `x`
/// held constant.
fn check_binary(
    seed: u64,
    a: Tensor,
    b: Tensor,
    f: impl Fn(&mut Graph, Var, Var) -> Result<Var> + Copy,
) -> Result<Float> {
    let left = check_unary(seed, a.clone(), |g, x| {
        let c = g.constant(b.clone())?;
        f(g, x, c)
    })?;
    let right = check_unary(seed, b.clone(), |g, x| {
        let c = g.constant(a.clone())?;
        f(g, c, x)
    })?;
    Ok(left.max(right))
}

fn add(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let a = normal(&[2, 3, 2], &mut r);
    let same = check_binary(seed, a.clone(), normal(&[2, 3, 2], &mut r), |g, x, y| g.add(x, y))?;
    let tiled = check_binary(seed, a, normal(&[3, 2], &mut r), |g, x, y| g.add(x, y))?;
    Ok(same.max(tiled))
}

fn multiply(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let a = normal(&[3, 4], &mut r);
    let same = check_binary(seed, a.clone(), normal(&[3, 4], &mut r), |g, x, y| g.mul(x, y))?;
    let scalar = check_binary(seed, a, normal(&[1], &mut r), |g, x, y| g.mul(x, y))?;
    Ok(same.max(scalar))
}

fn scale(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let factor: Float = r.random_range(-3.0..3.0);
    check_unary(seed, normal(&[5], &mut r), |g, x| g.scale(x, factor))
}

fn matmul(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    check_binary(seed, normal(&[3, 4], &mut r), normal(&[4, 2], &mut r), |g, x, y| g.matmul(x, y))
}

fn conv2d(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let mut worst: Float = 0.0;
    for (stride, dilation, k) in [(1, 1, 3), (2, 1, 3), (1, 2, 3), (1, 1, 1), (2, 1, 1), (1, 2, 5)] {
        let x = normal(&[2, 2, 4, 4], &mut r);
        let w = normal(&[3, 2, k, k], &mut r);
        worst = worst.max(check_binary(seed, x, w, move |g, x, w| g.conv2d(x, w, stride, dilation))?);
    }
    Ok(worst)
}

fn depthwise_conv2d(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let mut worst: Float = 0.0;
    for (stride, dilation, k) in [(1, 1, 3), (2, 1, 5), (1, 2, 3), (1, 2, 5)] {
        let x = normal(&[2, 3, 4, 4], &mut r);
        let w = normal(&[3, 1, k, k], &mut r);
        worst = worst.max(check_binary(seed, x, w, move |g, x, w| g.depthwise_conv2d(x, w, stride, dilation))?);
    }
    Ok(worst)
}

fn relu(seed: u64) -> Result<Float> {
    check_unary(seed, away_from_zero(&[3, 5], 1e-3, &mut rng(seed)), |g, x| g.relu(x))
}

fn max_pool(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let a = check_unary(seed, normal(&[2, 2, 4, 4], &mut r), |g, x| g.max_pool3x3(x, 1))?;
    let b = check_unary(seed, normal(&[1, 2, 4, 4], &mut r), |g, x| g.max_pool3x3(x, 2))?;
    Ok(a.max(b))
}

fn avg_pool(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let a = check_unary(seed, normal(&[2, 2, 4, 4], &mut r), |g, x| g.avg_pool3x3(x, 1))?;
    let b = check_unary(seed, normal(&[1, 2, 4, 4], &mut r), |g, x| g.avg_pool3x3(x, 2))?;
    Ok(a.max(b))
}

fn global_avg_pool(seed: u64) -> Result<Float> {
    check_unary(seed, normal(&[2, 3, 3, 2], &mut rng(seed)), |g, x| g.global_avg_pool(x))
}

fn concat(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let other = normal(&[2, 1, 3, 3], &mut r);
    let channels = check_unary(seed, normal(&[2, 2, 3, 3], &mut r), |g, x| {
        let c = g.constant(other.clone())?;
        g.concat(&[c, x, c], 1)
    })?;
    let rows = check_unary(seed, normal(&[2, 3], &mut r), |g, x| {
        let s = g.scale(x, 2.0)?;
        g.concat(&[x, s], 0)
    })?;
    Ok(channels.max(rows))
}

fn batch_norm(seed: u64) -> Result<Float> {
    check_unary(seed, normal(&[3, 2, 2, 2], &mut rng(seed)), |g, x| g.batch_norm(x))
}

fn fixed_norm(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let mean: Vec<Float> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
    let var: Vec<Float> = (0..2).map(|_| r.random_range(0.1..2.0)).collect();
    check_unary(seed, normal(&[2, 2, 3, 3], &mut r), move |g, x| g.fixed_norm(x, &mean, &var))
}

fn softmax(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let rows = check_unary(seed, normal(&[3, 4], &mut r), |g, x| g.softmax(x, 1))?;
    let cols = check_unary(seed, normal(&[3, 4], &mut r), |g, x| g.softmax(x, 0))?;
    let vector = check_unary(seed, normal(&[6], &mut r), |g, x| g.softmax(x, 0))?;
    Ok(rows.max(cols).max(vector))
}

fn log(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let x = Tensor::new(vec![6], (0..6).map(|_| r.random_range(0.2..3.0)).collect())?;
    check_unary(seed, x, |g, x| g.log(x, 1e-12))
}

fn sum(seed: u64) -> Result<Float> {
    check_unary(seed, normal(&[2, 3, 2], &mut rng(seed)), |g, x| g.sum(x))
}

fn square(seed: u64) -> Result<Float> {
    check_unary(seed, normal(&[7], &mut rng(seed)), |g, x| g.square(x))
}

fn abs(seed: u64) -> Result<Float> {
    check_unary(seed, away_from_zero(&[7], 1e-3, &mut rng(seed)), |g, x| g.abs(x))
}

fn pick(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let index = r.random_range(0..12);
    check_unary(seed, normal(&[3, 4], &mut r), move |g, x| {
        let p = g.pick(x, index)?;
        let q = g.pick(x, (index + 5) % 12)?;
        g.mul(p, q)
    })
}

fn softmax_cross_entropy(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    let x = normal(&[4, 5], &mut r).map(|v| 2.0 * v);
    finite_difference_check(|g, x| g.softmax_cross_entropy(x, &labels), &x, EPSILON)
}

// ---- loss terms --------------------------------------------------------------

fn cell() -> CellSpec {
    CellSpec::new(6).unwrap()
}

/// Operation entropy summed over the edges of two cell types.
fn op_entropy(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let other = normal(&[14, 7], &mut r);
    let x = normal(&[14, 7], &mut r).map(|v| 2.0 * v);
    finite_difference_check(
        |g, x| {
            let o = g.constant(other.clone())?;
            op_entropy_loss(g, &[x, o])
        },
        &x,
        EPSILON,
    )
}

/// Per-group entropy of the softmax over the group's `beta`.
fn group_entropy(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let n = r.random_range(2..9);
    let k = r.random_range(1..=n);
    finite_difference_check(|g, x| Ok(edge_group_terms(g, x, k)?.0), &normal(&[n], &mut r), EPSILON)
}

/// Squared deviation of the positive `beta` mass from `K`.
fn group_cardinality(seed: u64) -> Result<Float> {
    let mut r = rng(seed);
    let n = r.random_range(2..9);
    let k = r.random_range(1..=n);
    let x = away_from_zero(&[n], 1e-3, &mut r);
    finite_difference_check(|g, x| Ok(edge_group_terms(g, x, k)?.1), &x, EPSILON)
}

fn preset(seed: u64) -> GroupPreset {
    GroupPreset::ALL[seed as usize % GroupPreset::ALL.len()]
}

/// Edge loss over every group of a preset.
fn edge_loss_sum(seed: u64) -> Result<Float> {
    let groups: Vec<EdgeGroup> = preset(seed).groups(cell())?;
    let x = away_from_zero(&[14], 1e-3, &mut rng(seed));
    finite_difference_check(|g, x| Ok(edge_loss(g, &[x], cell(), &groups)?.total), &x, EPSILON)
}

/// Weighted objective with every term a function of one `[14, 8]` leaf:
/// columns 0..7 act as `alpha`, column 7 as `beta`, and the whole matrix
/// as classifier logits.
fn objective(g: &mut Graph, x: Var, groups: &[EdgeGroup], labels: &[usize], lambdas: Lambdas) -> Result<Var> {
    let (l_c, l_o, l_e) = objective_terms(g, x, groups, labels)?;
    total_loss_var(g, l_c, l_o, l_e, lambdas)
}

pub fn objective_terms(g: &mut Graph, x: Var, groups: &[EdgeGroup], labels: &[usize]) -> Result<(Var, Var, Var)> {
    let mut alpha_rows = Vec::new();
    let mut beta = Vec::new();
    for e in 0..14 {
        let items = (0..7).map(|o| g.pick(x, e * 8 + o)).collect::<Result<Vec<_>>>()?;
        alpha_rows.push(as_row(g, &items)?);
        beta.push(g.pick(x, e * 8 + 7)?);
    }
    let alpha = g.concat(&alpha_rows, 0)?;
    let beta = g.concat(&beta, 0)?;
    let l_c = g.softmax_cross_entropy(x, labels)?;
    let l_o = op_entropy_loss(g, &[alpha])?;
    let l_e = edge_loss(g, &[beta], cell(), groups)?.total;
    Ok((l_c, l_o, l_e))
}

/// Scalars gathered into a `[1, n]` row.
fn as_row(g: &mut Graph, items: &[Var]) -> Result<Var> {
    let flat = g.concat(items, 0)?;
    let ones = g.constant(Tensor::ones(&[1, items.len()]))?;
    g.mul(ones, flat)
}

fn objective_instance(seed: u64) -> (Tensor, Vec<EdgeGroup>, Vec<usize>, Lambdas) {
    let mut r = rng(seed);
    let x = away_from_zero(&[14, 8], 1e-3, &mut r);
    let labels = (0..14).map(|_| r.random_range(0..8)).collect();
    let lambdas = Lambdas {
        lambda_c: r.random_range(0.0..1.0),
        lambda_alpha: r.random_range(0.0..1.0),
        lambda_beta: 4.0 * r.random_range(0.0..1.0),
    };
    (x, preset(seed).groups(cell()).unwrap(), labels, lambdas)
}

fn total_objective(seed: u64) -> Result<Float> {
    let (x, groups, labels, lambdas) = objective_instance(seed);
    finite_difference_check(|g, x| objective(g, x, &groups, &labels, lambdas), &x, EPSILON)
}

// ---- classification loss through the network ---------------------------------

pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec { cells: 1, channels: 2, nodes: 6, in_channels: 3, classes: 3 }
}

struct NetInstance {
    net: SuperNetwork,
    arch: ArchParams,
    images: Tensor,
    labels: Vec<usize>,
}

fn net_instance(seed: u64) -> Result<NetInstance> {
    let mut r = rng(seed);
    let net = SuperNetwork::new(tiny_spec(), seed)?;
    let mut arch = ArchParams::uniform(net.cell, &[CellType::Normal]);
    arch.alpha[0] = normal(&[14, 7], &mut r);
    arch.beta[0] = normal(&[14], &mut r);
    let images = normal(&[2, 3, 4, 4], &mut r);
    let labels = (0..2).map(|_| r.random_range(0..3)).collect();
    Ok(NetInstance { net, arch, images, labels })
}

fn classification_loss(inst: &NetInstance, net: &SuperNetwork, arch: &ArchParams) -> Result<Float> {
    let mut fwd = Forward::new(&net.theta, false, NormMode::Batch)?;
    let x = fwd.graph.constant(inst.images.clone())?;
    let (logits, _) = net.forward(&mut fwd, arch, false, x)?;
    let loss = fwd.graph.softmax_cross_entropy(logits, &inst.labels)?;
    Ok(fwd.graph.value(loss).item())
}

fn relative(analytic: Float, numeric: Float) -> Float {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Cross-entropy of the network's logits, differentiated with respect to
/// `alpha`, `beta` and a sample of the weights.
fn network_classification(seed: u64) -> Result<Float> {
    let inst = net_instance(seed)?;
    let mut fwd = Forward::new(&inst.net.theta, true, NormMode::Batch)?;
    let x = fwd.graph.constant(inst.images.clone())?;
    let (logits, vars) = inst.net.forward(&mut fwd, &inst.arch, true, x)?;
    let loss = fwd.graph.softmax_cross_entropy(logits, &inst.labels)?;
    let grads = fwd.graph.gradients(loss)?;
    let vars = vars.expect("trainable architecture");

    let mut worst: Float = 0.0;
    let mut arch = inst.arch.clone();
    for (which, var) in [(0, vars.alpha[0]), (1, vars.beta[0])] {
        let analytic = grads.of(var).clone();
        for k in 0..analytic.numel() {
            let t = if which == 0 { &mut arch.alpha[0] } else { &mut arch.beta[0] };
            let original = t.data()[k];
            t.data_mut()[k] = original + EPSILON;
            let plus = classification_loss(&inst, &inst.net, &arch)?;
            let t = if which == 0 { &mut arch.alpha[0] } else { &mut arch.beta[0] };
            t.data_mut()[k] = original - EPSILON;
            let minus = classification_loss(&inst, &inst.net, &arch)?;
            let t = if which == 0 { &mut arch.alpha[0] } else { &mut arch.beta[0] };
            t.data_mut()[k] = original;
            worst = worst.max(relative(analytic.data()[k], (plus - minus) / (2.0 * EPSILON)));
        }
    }

    let mut r = rng(seed ^ 0x7e7a);
    let mut net = inst.net.clone();
    for _ in 0..24 {
        let p = r.random_range(0..net.theta.len());
        let c = r.random_range(0..net.theta.tensors()[p].numel());
        let analytic = grads.of(fwd.theta_vars()[p]).data()[c];
        let original = net.theta.tensors()[p].data()[c];
        net.theta.tensors_mut()[p].data_mut()[c] = original + EPSILON;
        let plus = classification_loss(&inst, &net, &inst.arch)?;
        net.theta.tensors_mut()[p].data_mut()[c] = original - EPSILON;
        let minus = classification_loss(&inst, &net, &inst.arch)?;
        net.theta.tensors_mut()[p].data_mut()[c] = original;
        worst = worst.max(relative(analytic, (plus - minus) / (2.0 * EPSILON)));
    }
    Ok(worst)
}

pub fn primitives() -> Vec<Case> {
    vec![
        Case { name: "add", check: add },
        Case { name: "multiply", check: multiply },
        Case { name: "scale", check: scale },
        Case { name: "matmul", check: matmul },
        Case { name: "conv2d", check: conv2d },
        Case { name: "depthwise_conv2d", check: depthwise_conv2d },
        Case { name: "relu", check: relu },
        Case { name: "max_pool3x3", check: max_pool },
        Case { name: "avg_pool3x3", check: avg_pool },
        Case { name: "global_avg_pool", check: global_avg_pool },
        Case { name: "concat", check: concat },
        Case { name: "batch_norm", check: batch_norm },
        Case { name: "fixed_norm", check: fixed_norm },
        Case { name: "softmax", check: softmax },
        Case { name: "log", check: log },
        Case { name: "sum", check: sum },
        Case { name: "square", check: square },
        Case { name: "abs", check: abs },
        Case { name: "pick", check: pick },
        Case { name: "softmax_cross_entropy", check: softmax_cross_entropy },
    ]
}

pub fn loss_terms() -> Vec<Case> {
    vec![
        Case { name: "classification loss through the network", check: network_classification },
        Case { name: "operation entropy per edge, summed", check: op_entropy },
        Case { name: "group edge entropy", check: group_entropy },
        Case { name: "group cardinality penalty", check: group_cardinality },
        Case { name: "edge loss over groups", check: edge_loss_sum },
        Case { name: "weighted total objective", check: total_objective },
    ]
}

/// Largest deviation between the gradient of `L_C + L_O + L_E` and the sum
/// of the three separately computed gradients.
pub fn linearity_gap(seed: u64) -> Result<Float> {
    let (x, groups, labels, _) = objective_instance(seed);
    let grad_of = |pick: &dyn Fn(Var, Var, Var, &mut Graph) -> Result<Var>| -> Result<Tensor> {
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone(), Role::Alpha)?;
        let (c, o, e) = objective_terms(&mut g, leaf, &groups, &labels)?;
        let loss = pick(c, o, e, &mut g)?;
        Ok(g.gradients(loss)?.of(leaf).clone())
    };
    let whole = grad_of(&|c, o, e, g| {
        let s = g.add(c, o)?;
        g.add(s, e)
    })?;
    let parts = [grad_of(&|c, _, _, _| Ok(c))?, grad_of(&|_, o, _, _| Ok(o))?, grad_of(&|_, _, e, _| Ok(e))?];
    let mut summed = Tensor::zeros(whole.shape());
    for p in &parts {
        summed.add_scaled(p, 1.0);
    }
    Ok(whole.max_abs_diff(&summed))
}
