//! Finite-difference gradient checking.
//!
//! Numerical gradients are computed only from forward evaluations, so they
//! are independent of the backward rules they are compared against.

use rand::Rng as _;

use crate::autodiff::{AttentionMask, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::{Float, Tensor};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-3;

/// Accepted relative error for the active scalar width.
#[cfg(not(feature = "f64"))]
pub const GRAD_TOLERANCE: f64 = 1e-2;
#[cfg(feature = "f64")]
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks the gradient of a scalar function of `inputs` with respect to
/// every input element. Returns the largest relative error over inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(f64::from(g.value(out).item()))
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(vars[i]) {
            Some(t) => t.data().iter().map(|&v| f64::from(v)).collect(),
            None => vec![0.0; input.numel()],
        };
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_EPS as Float;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_EPS as Float;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_EPS));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Checks parameter gradients of a scalar model function on up to
/// `per_param` randomly chosen coordinates of each listed parameter.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    rng: &mut Rng,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let out = f(&mut g)?;
        Ok(f64::from(g.value(out).item()))
    };

    let mut work = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &id in ids {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        let grad = grads.param(id);
        for j in coords {
            analytic.push(grad.map_or(0.0, |t| f64::from(t.data()[j])));
            let orig = store.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + FD_EPS as Float;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig - FD_EPS as Float;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_EPS));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Outcome of checking one primitive over several random instances.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

pub(crate) fn random_tensor(rng: &mut Rng, shape: &[usize], scale: Float) -> Tensor {
    crate::params::uniform(rng, shape, scale)
}

/// Reduces any output to a scalar through fixed random weights, so that
/// every output element contributes a distinct coefficient.
pub fn project(g: &mut Graph<'_>, out: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(random_tensor(rng, &shape, 1.0));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type Instance = (Vec<Tensor>, Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>>);

fn instance(name: &str, rng: &mut Rng) -> Instance {
    let proj_seed: u64 = rng.gen();
    let dim = |rng: &mut Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    macro_rules! projected {
        ($body:expr) => {{
            let body = $body;
            Box::new(move |g: &mut Graph<'_>, v: &[Var]| {
                let out: Var = body(g, v)?;
                let mut prng = rng::seeded(proj_seed);
                project(g, out, &mut prng)
            })
        }};
    }
    match name {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            (
                vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[k, n], 1.0)],
                projected!(|g: &mut Graph<'_>, v: &[Var]| g.matmul(v[0], v[1])),
            )
        }
        "add" | "mul" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let mul = name == "mul";
            (
                vec![random_tensor(rng, &s, 1.0), random_tensor(rng, &s, 1.0)],
                projected!(move |g: &mut Graph<'_>, v: &[Var]| if mul {
                    g.mul(v[0], v[1])
                } else {
                    g.add(v[0], v[1])
                }),
            )
        }
        "scale" => {
            let s = [dim(rng, 1, 6)];
            let f: Float = rng.gen_range(-2.0..2.0);
            (
                vec![random_tensor(rng, &s, 1.0)],
                projected!(move |g: &mut Graph<'_>, v: &[Var]| Ok::<_, crate::Error>(g.scale(v[0], f))),
            )
        }
        "add_bias" => {
            let (r, d) = (dim(rng, 1, 4), dim(rng, 1, 5));
            (
                vec![random_tensor(rng, &[r, d], 1.0), random_tensor(rng, &[d], 1.0)],
                projected!(|g: &mut Graph<'_>, v: &[Var]| g.add_bias(v[0], v[1])),
            )
        }
        "gelu" | "sigmoid" | "softmax" => {
            let s = [dim(rng, 1, 4), dim(rng, 2, 6)];
            let op = name.to_string();
            (
                vec![random_tensor(rng, &s, 2.0)],
                projected!(move |g: &mut Graph<'_>, v: &[Var]| Ok::<_, crate::Error>(match op.as_str() {
                    "gelu" => g.gelu(v[0]),
                    "sigmoid" => g.sigmoid(v[0]),
                    _ => g.softmax(v[0]),
                })),
            )
        }
        "layer_norm" => {
            let (r, d) = (3, 8);
            (
                vec![
                    random_tensor(rng, &[r, d], 1.0),
                    random_tensor(rng, &[d], 1.0),
                    random_tensor(rng, &[d], 1.0),
                ],
                projected!(|g: &mut Graph<'_>, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1e-5)),
            )
        }
        "attention" => {
            let heads = dim(rng, 1, 3);
            let d = heads * dim(rng, 1, 3);
            let (nq, nkv) = (dim(rng, 1, 5), dim(rng, 1, 5));
            let mut blocked: Vec<bool> = (0..nq * nkv).map(|_| rng.gen_bool(0.3)).collect();
            for i in 0..nq {
                blocked[i * nkv] = false;
            }
            let mask = AttentionMask::new(nq, nkv, blocked).expect("sized");
            (
                vec![
                    random_tensor(rng, &[nq, d], 1.0),
                    random_tensor(rng, &[nkv, d], 1.0),
                    random_tensor(rng, &[nkv, d], 1.0),
                ],
                projected!(move |g: &mut Graph<'_>, v: &[Var]| g.attention(
                    v[0],
                    v[1],
                    v[2],
                    Some(&mask),
                    heads
                )),
            )
        }
        "embedding" => {
            let (rows, d) = (dim(rng, 2, 6), dim(rng, 1, 4));
            let ids: Vec<usize> = (0..dim(rng, 1, 8)).map(|_| rng.gen_range(0..rows)).collect();
            (
                vec![random_tensor(rng, &[rows, d], 1.0)],
                projected!(move |g: &mut Graph<'_>, v: &[Var]| g.embedding(v[0], &ids)),
            )
        }
        "reshape_transpose" => {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
            (
                vec![random_tensor(rng, &[r, c], 1.0)],
                projected!(move |g: &mut Graph<'_>, v: &[Var]| {
                    let t = g.transpose(v[0])?;
                    g.reshape(t, &[r * c])
                }),
            )
        }
        "concat_slice" => {
            let d = dim(rng, 1, 3);
            let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 3));
            (
                vec![random_tensor(rng, &[a, d], 1.0), random_tensor(rng, &[b, d], 1.0)],
                projected!(move |g: &mut Graph<'_>, v: &[Var]| {
                    let c = g.concat(&[v[0], v[1], v[0]])?;
                    g.slice_rows(c, 1, a + b + 1)
                }),
            )
        }
        "patchify" => {
            let k = dim(rng, 1, 2);
            let (c, h, w) = (dim(rng, 1, 2), k * dim(rng, 1, 3), k * dim(rng, 1, 3));
            (
                vec![random_tensor(rng, &[c, h, w], 1.0)],
                projected!(move |g: &mut Graph<'_>, v: &[Var]| {
                    let p = g.patchify(v[0], k)?;
                    let t = g.transpose(p)?;
                    let t = g.transpose(t)?;
                    g.unpatchify(t, c, h, w, k)
                }),
            )
        }
        "conv2d" => {
            let k = dim(rng, 1, 4);
            let (c, co) = (2, dim(rng, 1, 3));
            let (h, w) = (8 / k * k, 8 / k * k);
            (
                vec![random_tensor(rng, &[c, h, w], 1.0), random_tensor(rng, &[c, k, k, co], 1.0)],
                projected!(move |g: &mut Graph<'_>, v: &[Var]| g.conv2d(v[0], v[1], k)),
            )
        }
        "upsample2x" => {
            let (c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            (
                vec![random_tensor(rng, &[c, h, w], 1.0)],
                projected!(|g: &mut Graph<'_>, v: &[Var]| g.upsample2x(v[0])),
            )
        }
        "sum_mean" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            (
                vec![random_tensor(rng, &s, 1.0)],
                Box::new(|g: &mut Graph<'_>, v: &[Var]| {
                    let sq = g.mul(v[0], v[0])?;
                    let a = g.sum(sq);
                    let b = g.mean(v[0]);
                    let b = g.scale(b, 3.0);
                    g.add(a, b)
                }),
            )
        }
        "smooth_l1" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let weighted = rng.gen_bool(0.5);
            let n = s[0] * s[1];
            let weights: Option<Vec<Float>> =
                weighted.then(|| (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect());
            (
                vec![random_tensor(rng, &s, 2.5), random_tensor(rng, &s, 0.5)],
                Box::new(move |g: &mut Graph<'_>, v: &[Var]| g.smooth_l1(v[0], v[1], weights.clone())),
            )
        }
        "cross_entropy" => {
            let (n, c) = (dim(rng, 1, 4), dim(rng, 2, 6));
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            (
                vec![random_tensor(rng, &[n, c], 2.0)],
                Box::new(move |g: &mut Graph<'_>, v: &[Var]| g.cross_entropy(v[0], &targets)),
            )
        }
        "binary_cross_entropy" => {
            let n = dim(rng, 1, 4);
            let targets: Vec<Float> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            (
                vec![random_tensor(rng, &[n, 2], 2.0)],
                Box::new(move |g: &mut Graph<'_>, v: &[Var]| g.binary_cross_entropy(v[0], &targets)),
            )
        }
        other => unreachable!("unknown primitive {other}"),
    }
}

/// Every differentiable primitive, by the name the suite reports.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "mul",
    "scale",
    "add_bias",
    "gelu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "attention",
    "embedding",
    "reshape_transpose",
    "concat_slice",
    "patchify",
    "conv2d",
    "upsample2x",
    "sum_mean",
    "smooth_l1",
    "cross_entropy",
    "binary_cross_entropy",
];

/// Runs `instances` random finite-difference checks for every primitive.
pub fn primitive_suite(seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut rng = rng::rng_for(seed, name, i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let (inputs, f) = instance(name, &mut rng);
                worst = worst.max(check_inputs(&inputs, f)?);
            }
            Ok(CheckOutcome {
                name,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

/// Loss heads checked by [`head_suite`], each including its trainable
/// projection where it has one.
pub const LOSS_HEADS: &[&str] = &["mir", "itm", "mlm"];

// Projection weights are kept small: near-saturated probabilities leave
// gradients below what single-precision differences resolve.
fn head_instance(name: &str, rng: &mut Rng) -> Instance {
    match name {
        "mir" => {
            let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let only: Option<Vec<bool>> = if rng.gen_bool(0.5) {
                Some((0..h * w).map(|_| rng.gen_bool(0.5)).collect())
            } else {
                None
            };
            let recon = random_tensor(rng, &[3, h, w], 1.5);
            let target = random_tensor(rng, &[3, h, w], 1.0);
            (
                vec![recon, target],
                Box::new(move |g: &mut Graph<'_>, v: &[Var]| {
                    let p = g.sigmoid(v[0]);
                    crate::heads::loss_mir(g, p, v[1], only.as_deref())
                }),
            )
        }
        "itm" => {
            // One row, as the model scores each pair on its own graph.
            let (n, d) = (1, rng.gen_range(2..=6));
            let labels: Vec<Float> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            (
                vec![
                    random_tensor(rng, &[n, d], 1.0),
                    random_tensor(rng, &[d, 2], 0.5),
                    random_tensor(rng, &[2], 0.1),
                ],
                Box::new(move |g: &mut Graph<'_>, v: &[Var]| {
                    let z = g.matmul(v[0], v[1])?;
                    let logits = g.add_bias(z, v[2])?;
                    crate::heads::loss_itm(g, logits, &labels)
                }),
            )
        }
        "mlm" => {
            let (l, d, vocab) = (rng.gen_range(3..=6), rng.gen_range(2..=5), rng.gen_range(3..=7));
            let k = rng.gen_range(1..=l);
            let positions: Vec<usize> = (0..k).map(|_| rng.gen_range(0..l)).collect();
            let labels: Vec<usize> = (0..k).map(|_| rng.gen_range(0..vocab)).collect();
            (
                vec![
                    random_tensor(rng, &[l, d], 1.0),
                    random_tensor(rng, &[d, vocab], 0.5),
                    random_tensor(rng, &[vocab], 0.1),
                ],
                Box::new(move |g: &mut Graph<'_>, v: &[Var]| {
                    let rows = g.gather_rows(v[0], &positions)?;
                    let z = g.matmul(rows, v[1])?;
                    let logits = g.add_bias(z, v[2])?;
                    crate::heads::loss_mlm(g, logits, &labels)
                }),
            )
        }
        other => unreachable!("unknown loss head {other}"),
    }
}

/// Random finite-difference checks of every loss head.
pub fn head_suite(seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    LOSS_HEADS
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut rng = rng::rng_for(seed, name, i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let (inputs, f) = head_instance(name, &mut rng);
                worst = worst.max(check_inputs(&inputs, f)?);
            }
            Ok(CheckOutcome {
                name,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

/// Whether a toy model initialised from `seed` yields a finite loss and
/// finite gradients on one synthetic pre-training batch.
pub fn end_to_end_finite(seed: u64) -> Result<bool> {
    use crate::data::{synthetic_dataset, SyntheticSpec};
    use crate::encoder::EncoderConfig;
    use crate::model::{ModelConfig, Mvlt};
    use crate::text::Vocab;
    use crate::train::{batch_gradients, make_pretrain_batch, MaskSettings, ObjectiveSettings};
    use crate::vision::MaskStyle;

    let ds = synthetic_dataset(4, 32, &SyntheticSpec::default(), seed)?;
    let vocab = Vocab::build(&ds.captions(), 64)?;
    let (model, store) = Mvlt::new(&ModelConfig::new(EncoderConfig::toy(vocab.len())), seed)?;
    let masks = MaskSettings {
        vision_ratio: 0.5,
        text_ratio: 0.15,
        patch: 4,
        alpha: 2,
        style: MaskStyle::RandomGrid,
    };
    let batch = make_pretrain_batch(&ds, &vocab, 16, 2, &masks, 0.5, &mut rng::rng_for(seed, "e2e-batch", 0))?;
    let (loss, grads) = match batch_gradients(&model, &store, &batch, &ObjectiveSettings::default()) {
        Ok(r) => r,
        Err(crate::Error::NonFinite { .. }) => return Ok(false),
        Err(e) => return Err(e),
    };
    Ok(loss.total.is_finite() && grads.iter().all(|(_, g)| g.data().iter().all(|x| x.is_finite())))
}
