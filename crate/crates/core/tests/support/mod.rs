//! Independent double-precision reference implementations used by the
//! gradient and aggregation checks. Nothing here calls into the simulator's
//! numeric kernels.

#![allow(dead_code)]

use fedsim::rngkit::RngStream;
use fedsim::tensornet::{forward, init_params, loss_and_grad, ModelKind, ModelParams, ModelSpec, Tensor};

const C1: usize = 16;
const C2: usize = 32;

/// Activation pattern of one unperturbed pass: which ReLU units were on and
/// which input won each max-pool window. Replaying it keeps finite
/// differences on one linear piece of the network.
#[derive(Clone, Default)]
pub struct Pattern {
    relu1: Vec<bool>,
    pool1: Vec<usize>,
    relu2: Vec<bool>,
    pool2: Vec<usize>,
}

fn relu(v: &mut [f64], pattern: &mut Vec<bool>, frozen: bool) {
    if !frozen {
        *pattern = v.iter().map(|&x| x > 0.0).collect();
    }
    for (x, &on) in v.iter_mut().zip(pattern.iter()) {
        if !on {
            *x = 0.0;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3(x: &[f64], b: usize, cin: usize, h: usize, w: usize, wt: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * cout * h * w];
    for n in 0..b {
        for o in 0..cout {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * cin + c) * 3 + ky) * 3 + kx]
                                    * x[((n * cin + c) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    y[((n * cout + o) * h + oy) * w + ox] = acc;
                }
            }
        }
    }
    y
}

fn maxpool(x: &[f64], planes: usize, h: usize, w: usize, pattern: &mut Vec<usize>, frozen: bool) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    if !frozen {
        pattern.clear();
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (p * h + 2 * oy) * w + 2 * ox;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    pattern.push(best);
                }
            }
        }
    }
    pattern.iter().map(|&i| x[i]).collect()
}

fn dense(x: &[f64], b: usize, din: usize, w: &[f64], bias: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * dout];
    for n in 0..b {
        for o in 0..dout {
            let mut acc = bias[o];
            for i in 0..din {
                acc += w[o * din + i] * x[n * din + i];
            }
            y[n * dout + o] = acc;
        }
    }
    y
}

fn mean_cross_entropy(logits: &[f64], labels: &[usize], n: usize) -> f64 {
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * n..(b + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[label];
    }
    total / labels.len() as f64
}

fn split<'a>(mut p: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    for &s in sizes {
        let (head, tail) = p.split_at(s);
        out.push(head);
        p = tail;
    }
    out
}

/// Mean cross-entropy in `f64`. With `frozen` set the stored pattern is
/// replayed; otherwise it is recorded into `pattern`.
pub fn reference_loss(
    spec: &ModelSpec,
    params: &[f64],
    x: &[f64],
    labels: &[usize],
    dropout_mask: Option<&[f64]>,
    pattern: &mut Pattern,
    frozen: bool,
) -> f64 {
    let [c, h, w] = spec.input_shape;
    let b = labels.len();
    let n = spec.n_classes;
    match spec.kind {
        ModelKind::Mlp => {
            let d = c * h * w;
            let hid = spec.hidden;
            let p = split(params, &[hid * d, hid, n * hid, n]);
            let mut a = dense(x, b, d, p[0], p[1], hid);
            relu(&mut a, &mut pattern.relu1, frozen);
            if let Some(mask) = dropout_mask {
                for (v, m) in a.iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            mean_cross_entropy(&dense(&a, b, hid, p[2], p[3], n), labels, n)
        }
        ModelKind::SmallCnn => {
            let flat = C2 * (h / 4) * (w / 4);
            let p = split(params, &[C1 * c * 9, C1, C2 * C1 * 9, C2, n * flat, n]);
            let mut a = conv3x3(x, b, c, h, w, p[0], p[1], C1);
            relu(&mut a, &mut pattern.relu1, frozen);
            let a = maxpool(&a, b * C1, h, w, &mut pattern.pool1, frozen);
            let mut a = conv3x3(&a, b, C1, h / 2, w / 2, p[2], p[3], C2);
            relu(&mut a, &mut pattern.relu2, frozen);
            let a = maxpool(&a, b * C2, h / 2, w / 2, &mut pattern.pool2, frozen);
            mean_cross_entropy(&dense(&a, b, flat, p[4], p[5], n), labels, n)
        }
        ModelKind::WidePayload => unimplemented!("payload parameters are inert"),
    }
}

pub struct GradReport {
    pub count: usize,
    pub max_rel: f64,
    pub worst_index: usize,
    /// Share of parameters whose relative error is below `1e-4`.
    pub frac_below_1e4: f64,
    /// Relative errors, one per parameter.
    pub rel: Vec<f64>,
}

/// Denominator floor for the relative error, so parameters whose true
/// gradient is essentially zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the simulator's analytic gradient against central differences
/// of [`reference_loss`] with step `eps`.
pub fn gradcheck(spec: &ModelSpec, init_seed: u64, data_seed: u64, batch: usize, dropout_seed: Option<u64>, eps: f64) -> GradReport {
    let params = init_params(spec, &mut RngStream::from_seed(init_seed)).unwrap();
    let params = perturb_biases(spec, params, init_seed);
    let [c, h, w] = spec.input_shape;
    let mut data = RngStream::from_seed(data_seed);
    let xs: Vec<f32> = (0..batch * c * h * w).map(|_| data.next_gaussian() as f32).collect();
    let labels: Vec<usize> = (0..batch).map(|_| data.next_below(spec.n_classes as u64) as usize).collect();
    let x = Tensor::new(vec![batch, c, h, w], xs.clone()).unwrap();

    let mask: Option<Vec<f64>> = dropout_seed.map(|s| {
        let pass = forward(spec, &params, &x, Some(&mut RngStream::from_seed(s))).unwrap();
        pass.dropout_mask().expect("dropout active").iter().map(|&m| f64::from(m)).collect()
    });
    let mut stream = dropout_seed.map(RngStream::from_seed);
    let (_, grad) = loss_and_grad(spec, &params, &x, &labels, stream.as_mut()).unwrap();

    let x64: Vec<f64> = xs.iter().map(|&v| f64::from(v)).collect();
    let mut p64: Vec<f64> = params.values().iter().map(|&v| f64::from(v)).collect();
    let mut pattern = Pattern::default();
    reference_loss(spec, &p64, &x64, &labels, mask.as_deref(), &mut pattern, false);

    let mut rel = Vec::with_capacity(p64.len());
    for i in 0..p64.len() {
        let orig = p64[i];
        p64[i] = orig + eps;
        let up = reference_loss(spec, &p64, &x64, &labels, mask.as_deref(), &mut pattern, true);
        p64[i] = orig - eps;
        let down = reference_loss(spec, &p64, &x64, &labels, mask.as_deref(), &mut pattern, true);
        p64[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        rel.push(relative_error(f64::from(grad.values()[i]), numeric));
    }
    let (worst_index, max_rel) = rel
        .iter()
        .cloned()
        .enumerate()
        .fold((0, 0.0), |best, (i, r)| if r > best.1 { (i, r) } else { best });
    GradReport {
        count: rel.len(),
        max_rel,
        worst_index,
        frac_below_1e4: rel.iter().filter(|&&r| r < 1e-4).count() as f64 / rel.len() as f64,
        rel,
    }
}

/// Freshly initialised biases are zero; give them small values so their
/// gradients are exercised away from the all-zero special case.
fn perturb_biases(spec: &ModelSpec, mut params: ModelParams, seed: u64) -> ModelParams {
    let layout = spec.layout();
    let mut s = RngStream::from_seed(seed ^ 0x5eed);
    for (entry, values) in layout.entries().iter().zip(params.tensors_mut()) {
        if entry.shape.len() == 1 {
            for v in values.iter_mut() {
                *v = (0.1 * s.next_gaussian()) as f32;
            }
        }
    }
    params
}

/// Exact weighted mean in `f64` with weights `count_i / total`.
pub fn reference_mean(values: &[Vec<f32>], counts: &[usize]) -> Vec<f64> {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let mut out = vec![0.0f64; values[0].len()];
    for (v, &c) in values.iter().zip(counts) {
        let w = c as f64 / total;
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * f64::from(x);
        }
    }
    out
}

/// Weighted sum of magnitudes, the scale against which cancellation error
/// is measured.
pub fn reference_scale(values: &[Vec<f32>], counts: &[usize]) -> Vec<f64> {
    let abs: Vec<Vec<f32>> = values.iter().map(|v| v.iter().map(|x| x.abs()).collect()).collect();
    reference_mean(&abs, counts)
}

/// Spacing of `f32` values at magnitude `x`.
pub fn f32_ulp(x: f64) -> f64 {
    let a = (x as f32).abs();
    if a == 0.0 {
        return f64::from(f32::from_bits(1));
    }
    let next = f32::from_bits(a.to_bits() + 1);
    f64::from(next) - f64::from(a)
}

pub fn single_layout(n: usize) -> std::sync::Arc<fedsim::tensornet::Layout> {
    use fedsim::tensornet::{Layout, LayoutEntry};
    std::sync::Arc::new(Layout::new(vec![LayoutEntry::new("p", vec![n])]))
}

pub fn uplinks(
    layout: &std::sync::Arc<fedsim::tensornet::Layout>,
    values: &[Vec<f32>],
    counts: &[usize],
) -> Vec<fedsim::engine::UplinkPackage> {
    values
        .iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (v, &c))| fedsim::engine::UplinkPackage {
            client_id: i as u64,
            updated_params: ModelParams::new(layout.clone(), v.clone()).unwrap(),
            sample_count: c,
            train_loss: 0.0,
            compute_nanos: 0,
        })
        .collect()
}

/// Up to 5 uplinks of up to 16 parameters spanning five decades.
pub struct FedavgInstance {
    pub values: Vec<Vec<f32>>,
    pub counts: Vec<usize>,
}

pub fn random_fedavg_instance(s: &mut RngStream, positive: bool) -> FedavgInstance {
    let k = 1 + s.next_below(5) as usize;
    let n = 1 + s.next_below(16) as usize;
    let values = (0..k)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let v = s.next_gaussian() * 10f64.powi(s.next_below(5) as i32 - 2);
                    (if positive { v.abs() } else { v }) as f32
                })
                .collect()
        })
        .collect();
    let counts = (0..k).map(|_| 1 + s.next_below(1000) as usize).collect();
    FedavgInstance { values, counts }
}

/// Worst error in `f32` ulps: of the exact result for same-sign inputs, of
/// the magnitude scale when signs are mixed and the result may cancel.
pub fn fedavg_worst_ulps(inst: &FedavgInstance, against_scale: bool) -> f64 {
    let l = single_layout(inst.values[0].len());
    let got = fedsim::fedserver::fedavg(&uplinks(&l, &inst.values, &inst.counts), &l).unwrap();
    let exact = reference_mean(&inst.values, &inst.counts);
    let scale = reference_scale(&inst.values, &inst.counts);
    got.values()
        .iter()
        .zip(exact.iter().zip(&scale))
        .map(|(&g, (&e, &m))| (f64::from(g) - e).abs() / f32_ulp(if against_scale { m } else { e }))
        .fold(0.0, f64::max)
}

/// The frozen 3-uplink instance whose result depends on accumulation order:
/// `(counts, values, bits in list order, bits in reversed order)`.
pub fn witness_fixture() -> (Vec<usize>, Vec<Vec<f32>>, (u32, u32)) {
    let text = include_str!("../fixtures/fedavg_witness_v1.txt");
    let mut counts = Vec::new();
    let mut values = Vec::new();
    let mut expected = (0u32, 0u32);
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts[0] == "=" {
            expected = (
                u32::from_str_radix(parts[1], 16).unwrap(),
                u32::from_str_radix(parts[2], 16).unwrap(),
            );
        } else {
            counts.push(parts[0].parse::<usize>().unwrap());
            values.push(vec![f32::from_bits(u32::from_str_radix(parts[1], 16).unwrap())]);
        }
    }
    (counts, values, expected)
}

pub fn labelled(labels: Vec<usize>, n_classes: usize) -> fedsim::datahub::Dataset {
    let n = labels.len();
    fedsim::datahub::Dataset::new(Tensor::zeros(vec![n, 1, 1, 1]).unwrap(), labels, n_classes).unwrap()
}

/// Disjointness, coverage of exactly `n_clients * spc` samples, per-client
/// size and per-client class count.
pub fn check_partition(
    p: &fedsim::datahub::Partition,
    d: &fedsim::datahub::Dataset,
    n_clients: usize,
    cpc: usize,
    spc: usize,
) -> Result<(), String> {
    use std::collections::HashSet;
    if p.assignment.len() != n_clients {
        return Err(format!("{} client lists for {n_clients} clients", p.assignment.len()));
    }
    p.validate(Some(d.len())).map_err(|e| e.to_string())?;
    let mut seen = HashSet::new();
    for (client, list) in p.assignment.iter().enumerate() {
        if list.len() != spc {
            return Err(format!("client {client} holds {} samples", list.len()));
        }
        let classes: HashSet<usize> = list.iter().map(|&i| d.labels()[i]).collect();
        if classes.len() != cpc {
            return Err(format!("client {client} holds {} classes", classes.len()));
        }
        for &i in list {
            if !seen.insert(i) {
                return Err(format!("sample {i} shared"));
            }
        }
    }
    if seen.len() != n_clients * spc {
        return Err(format!("{} samples covered", seen.len()));
    }
    Ok(())
}

/// A dataset with shuffled labels and a parameterisation it can satisfy:
/// `(dataset, n_clients, classes_per_client, samples_per_client, seed)`.
pub fn random_feasible_partition(seed: u64) -> (fedsim::datahub::Dataset, usize, usize, usize, u64) {
    let mut s = RngStream::from_seed(seed);
    let n_classes = 2 + s.next_below(10) as usize;
    let n_clients = 1 + s.next_below(30) as usize;
    let shard = 1 + s.next_below(8) as usize;
    let cpc = 1 + s.next_below(n_classes as u64) as usize;
    // enough whole shards per class that any class can serve every client
    let per_class = shard * n_clients + s.next_below(shard as u64) as usize;
    let mut labels: Vec<usize> = (0..n_classes * per_class).map(|i| i % n_classes).collect();
    s.shuffle(&mut labels);
    (labelled(labels, n_classes), n_clients, cpc, cpc * shard, s.next_u64())
}
