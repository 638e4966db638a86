//! Independent reference implementations used by the integration tests and
//! the acceptance run. Nothing here calls the code under test except to
//! evaluate the function being differentiated.
#![allow(dead_code)]

use fisherlda_core::fisher::{fv_encode, fv_normalize, GmmGradient};
use fisherlda_core::gmm::GmmModel;
use fisherlda_core::lda::lda_objective;
use fisherlda_core::net::{Linear, Mode, NetGrads, NetParams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller keeps the oracle free of extra dependencies
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn gauss_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * gauss(rng))
}

pub fn random_gmm<R: Rng>(rng: &mut R, k: usize, d: usize) -> GmmModel {
    GmmModel::new(
        DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)),
        gauss_matrix(rng, k, d, 1.0),
        DMatrix::from_fn(k, d, |_, _| rng.random_range(-0.5..0.5)),
    )
    .unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Fisher vector written out directly from its definition: posteriors from
/// the product of 1-D Gaussian densities, then the first and second order
/// statistics, averaged over descriptors.
pub fn fv_oracle(model: &GmmModel, x: &DMatrix<f64>) -> Vec<f64> {
    let k = model.num_components();
    let d = model.dim();
    let raw: Vec<f64> = model.log_weights_unnorm.iter().map(|w| w.exp()).collect();
    let total: f64 = raw.iter().sum();
    let pi: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mut phi = vec![0.0; k * d];
    let mut psi = vec![0.0; k * d];
    for i in 0..x.nrows() {
        let mut dens = vec![0.0; k];
        for c in 0..k {
            let mut p = pi[c];
            for j in 0..d {
                let var = model.log_vars[(c, j)].exp();
                let z = x[(i, j)] - model.means[(c, j)];
                p *= (-z * z / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            }
            dens[c] = p;
        }
        let s: f64 = dens.iter().sum();
        for c in 0..k {
            let gamma = dens[c] / s;
            for j in 0..d {
                let sigma = model.log_vars[(c, j)].exp().sqrt();
                let alpha = (x[(i, j)] - model.means[(c, j)]) / sigma;
                phi[c * d + j] += gamma * alpha / pi[c].sqrt();
                psi[c * d + j] += gamma * (alpha * alpha - 1.0) / (2.0 * pi[c]).sqrt();
            }
        }
    }
    let m = x.nrows() as f64;
    phi.iter().chain(&psi).map(|v| v / m).collect()
}

/// Central finite differences of `u · normalize(encode(G))` over
/// (`log π̃`, `μ`, `log σ²`).
pub fn fd_fv_gradient(model: &GmmModel, x: &DMatrix<f64>, u: &DVector<f64>, h: f64) -> GmmGradient {
    let f = |m: &GmmModel| fv_normalize(&fv_encode(m, x).unwrap()).values.dot(u);
    let k = model.num_components();
    let d = model.dim();
    let mut g = GmmGradient::zeros(k, d);
    let central = |perturb: &dyn Fn(&mut GmmModel, f64)| {
        let mut plus = model.clone();
        perturb(&mut plus, h);
        let mut minus = model.clone();
        perturb(&mut minus, -h);
        (f(&plus) - f(&minus)) / (2.0 * h)
    };
    for c in 0..k {
        g.d_log_weights[c] = central(&|m, s| m.log_weights_unnorm[c] += s);
        for j in 0..d {
            g.d_means[(c, j)] = central(&|m, s| m.means[(c, j)] += s);
            g.d_log_vars[(c, j)] = central(&|m, s| m.log_vars[(c, j)] += s);
        }
    }
    g
}

pub fn flatten_gmm_gradient(g: &GmmGradient) -> Vec<f64> {
    g.d_log_weights
        .iter()
        .chain(g.d_means.iter())
        .chain(g.d_log_vars.iter())
        .copied()
        .collect()
}

/// A labeled batch for LDA checks: `C ≤ 4` classes of 2–3 samples with
/// `d ≤ min(6, N − C)` so the within-class scatter is nonsingular.
pub fn random_lda_batch<R: Rng>(rng: &mut R) -> (DMatrix<f64>, Vec<usize>) {
    loop {
        let c = rng.random_range(2..=4);
        let mut labels = Vec::new();
        for class in 0..c {
            for _ in 0..rng.random_range(2..=3) {
                labels.push(class * 7 + 1);
            }
        }
        let n = labels.len();
        if n > 12 || n - c < 2 {
            continue;
        }
        let d = rng.random_range(2..=(n - c).min(6));
        let mut x = gauss_matrix(rng, n, d, 1.0);
        // separate the class means a little
        for (i, &l) in labels.iter().enumerate() {
            for j in 0..d {
                x[(i, j)] += 0.7 * (((l * 31 + j * 17) % 11) as f64 - 5.0) / 5.0;
            }
        }
        return (x, labels);
    }
}

pub fn lda_value(x: &DMatrix<f64>, labels: &[usize], lambda: f64, eps: f64) -> f64 {
    lda_objective(x, labels, lambda, eps).unwrap().0
}

pub fn fd_matrix(x: &DMatrix<f64>, h: f64, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        let mut p = x.clone();
        p[(i, j)] += h;
        let mut m = x.clone();
        m[(i, j)] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

/// Generalized eigenvalues of `(A, B)` from the real Schur form of `B⁻¹A`,
/// ascending.
pub fn dense_generalized_eigenvalues(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let m = b.clone().try_inverse().expect("B invertible") * a;
    let mut v: Vec<f64> = nalgebra::Schur::new(m)
        .eigenvalues()
        .expect("real spectrum")
        .iter()
        .copied()
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// A random small network.
pub fn random_net<R: Rng>(rng: &mut R, batch_norm: bool, dropout_rate: f64) -> NetParams {
    let input = rng.random_range(2..=5);
    let depth = rng.random_range(1..=3);
    let mut layers = Vec::new();
    let mut prev = input;
    for _ in 0..depth {
        let w = rng.random_range(2..=5);
        layers.push(Linear {
            weight: gauss_matrix(rng, w, prev, 0.8),
            bias: DVector::from_fn(w, |_, _| 0.3 * gauss(rng)),
        });
        prev = w;
    }
    let bn = batch_norm.then(|| fisherlda_core::net::BatchNorm {
        gamma: DVector::from_fn(prev, |_, _| rng.random_range(0.5..1.5)),
        beta: DVector::from_fn(prev, |_, _| 0.2 * gauss(rng)),
        running_mean: DVector::from_fn(prev, |_, _| 0.1 * gauss(rng)),
        running_var: DVector::from_fn(prev, |_, _| rng.random_range(0.5..2.0)),
    });
    NetParams {
        layers,
        bn,
        head: None,
        dropout_rate,
    }
}

/// Flat views of every trainable parameter, in a fixed order.
fn net_slices_mut(net: &mut NetParams) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for l in net.layers.iter_mut() {
        out.push(l.weight.as_mut_slice());
        out.push(l.bias.as_mut_slice());
    }
    if let Some(bn) = net.bn.as_mut() {
        out.push(bn.gamma.as_mut_slice());
        out.push(bn.beta.as_mut_slice());
    }
    out
}

pub fn flatten_net_grads(g: &NetGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &g.layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
    if let Some(bn) = &g.bn {
        out.extend_from_slice(bn.gamma.as_slice());
        out.extend_from_slice(bn.beta.as_slice());
    }
    out
}

/// Finite-difference gradient of `Σ U ∘ net(X)` with respect to every
/// parameter (flattened like [`flatten_net_grads`]) and the input.
pub fn fd_net(
    net: &NetParams,
    x: &DMatrix<f64>,
    u: &DMatrix<f64>,
    mode: Mode,
    seed: u64,
    h: f64,
) -> (Vec<f64>, DMatrix<f64>) {
    let f = |n: &NetParams, x: &DMatrix<f64>| n.forward(x, mode, seed).unwrap().0.component_mul(u).sum();
    let mut grads = Vec::new();
    let count = {
        let mut probe = net.clone();
        net_slices_mut(&mut probe).iter().map(|s| s.len()).collect::<Vec<_>>()
    };
    for (si, len) in count.into_iter().enumerate() {
        for e in 0..len {
            let mut plus = net.clone();
            net_slices_mut(&mut plus)[si][e] += h;
            let mut minus = net.clone();
            net_slices_mut(&mut minus)[si][e] -= h;
            grads.push((f(&plus, x) - f(&minus, x)) / (2.0 * h));
        }
    }
    let dx = fd_matrix(x, h, |xp| f(net, xp));
    (grads, dx)
}

/// Euclidean distance by explicit summation.
pub fn naive_distance(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..a.ncols() {
        let t = a[(i, c)] - b[(j, c)];
        s += t * t;
    }
    s.sqrt()
}

/// Orders gallery positions by pairwise comparison (distance, then index).
fn brute_order(dist: &[f64], candidates: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::new();
    for &g in candidates {
        let pos = order
            .iter()
            .position(|&o| dist[g] < dist[o] || (dist[g] == dist[o] && g < o))
            .unwrap_or(order.len());
        order.insert(pos, g);
    }
    order
}

/// CMC over explicit per-trial galleries: a probe's rank is one plus the
/// number of gallery items that beat its true match.
pub fn brute_cmc(
    probe: &DMatrix<f64>,
    probe_labels: &[usize],
    gallery: &DMatrix<f64>,
    gallery_labels: &[usize],
    subsets: &[Vec<usize>],
) -> Vec<f64> {
    let width = subsets[0].len();
    let mut counts = vec![0u64; width];
    for subset in subsets {
        for p in 0..probe.nrows() {
            let dist: Vec<f64> = (0..gallery.nrows()).map(|g| naive_distance(probe, p, gallery, g)).collect();
            let truth = *subset.iter().find(|&&g| gallery_labels[g] == probe_labels[p]).unwrap();
            let beaten = subset
                .iter()
                .filter(|&&g| dist[g] < dist[truth] || (dist[g] == dist[truth] && g < truth))
                .count();
            for c in counts.iter_mut().skip(beaten) {
                *c += 1;
            }
        }
    }
    let denom = (probe.nrows() * subsets.len()) as f64;
    counts.into_iter().map(|c| c as f64 / denom).collect()
}

/// Mean over probes with at least one relevant item of the precision
/// averaged at every relevant position; also returns the skipped probes.
pub fn brute_map(
    probe: &DMatrix<f64>,
    probe_labels: &[usize],
    gallery: &DMatrix<f64>,
    gallery_labels: &[usize],
) -> (f64, Vec<usize>) {
    let all: Vec<usize> = (0..gallery.nrows()).collect();
    let mut aps = Vec::new();
    let mut skipped = Vec::new();
    for p in 0..probe.nrows() {
        let dist: Vec<f64> = (0..gallery.nrows()).map(|g| naive_distance(probe, p, gallery, g)).collect();
        let order = brute_order(&dist, &all);
        let relevant: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &g)| gallery_labels[g] == probe_labels[p])
            .map(|(pos, _)| pos)
            .collect();
        if relevant.is_empty() {
            skipped.push(p);
            continue;
        }
        let mut sum = 0.0;
        for &pos in &relevant {
            let hits = relevant.iter().filter(|&&q| q <= pos).count();
            sum += hits as f64 / (pos + 1) as f64;
        }
        aps.push(sum / relevant.len() as f64);
    }
    (aps.iter().sum::<f64>() / aps.len() as f64, skipped)
}

/// Integer-valued embeddings (so distance ties occur) with labels drawn
/// from `ids` identities; every identity appears at least once.
pub fn random_ranking_instance<R: Rng>(
    rng: &mut R,
    ids: usize,
    n: usize,
    dim: usize,
) -> (DMatrix<f64>, Vec<usize>) {
    let x = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-2i32..=2) as f64);
    let labels = (0..n)
        .map(|i| if i < ids { i } else { rng.random_range(0..ids) })
        .collect();
    (x, labels)
}

/// Synthetic identities split into (train, test) images.
pub fn synthetic_split(
    ids: usize,
    per_id: usize,
    seed: u64,
) -> (
    Vec<fisherlda_core::dataset::DescriptorSet>,
    Vec<fisherlda_core::dataset::DescriptorSet>,
) {
    use fisherlda_core::dataset::{synth_generate, synth_split, Split};
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, im) in synth_generate(ids, per_id, 16, seed).unwrap().into_iter().enumerate() {
        match synth_split(i % per_id, per_id) {
            Split::Train => train.push(im),
            Split::Test => test.push(im),
        }
    }
    (train, test)
}

/// Desk-scale training configuration for 16-dimensional synthetic descriptors.
pub fn small_config(seed: u64) -> fisherlda_core::trainer::TrainConfig {
    use fisherlda_core::trainer::{ChannelSpec, TrainConfig};
    TrainConfig {
        batch_size: 32,
        lr_halving_period_epochs: 10,
        epochs: 4,
        gmm_update_period_epochs: 2,
        batches_per_epoch: Some(2),
        gmm_sample_batches: 2,
        hidden_widths: vec![16, 8],
        seed,
        channels: vec![
            ChannelSpec {
                name: "a".into(),
                columns: (0, 10),
                pca_dim: 4,
                components: 3,
            },
            ChannelSpec {
                name: "b".into(),
                columns: (10, 16),
                pca_dim: 3,
                components: 2,
            },
        ],
        em_max_iters: 30,
        ..TrainConfig::default()
    }
}
