//! Central finite-difference gradient verification.
//!
//! The checks here only ever call forward evaluations, so they are an oracle
//! independent of the backward sweep they validate. `run_full_suite` covers
//! every differentiable tape operation, the recurrent and convolutional
//! layers, all loss functions, and the composed encoder→classifier paths; the
//! `gradcheck` CLI command and the acceptance tests both run it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Domain, UtteranceSample};
use crate::error::Result;
use crate::layers::{GruLayer, ParamRegistry};
use crate::losses::{self, LossWeights, SoftLabelTable};
use crate::model::{ModelBundle, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for primitive operations.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for composed/recurrent paths.
pub const COMPOSED_TOL: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `x`, all coordinates.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let coords: Vec<usize> = (0..x.len()).collect();
    fd_gradient_coords(f, x, h, &coords)
}

/// Central finite differences restricted to `coords`, returned in order.
pub fn fd_gradient_coords(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    coords: &[usize],
) -> Vec<f64> {
    let mut xp = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise discrepancy, relative with an absolute floor of 1:
/// `|a−b| / max(|a|, |b|, 1)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Outcome of one named check over several random instances.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Builds the scalar objective `sum(w ⊙ out)` with fixed random weights so
/// every output coordinate contributes a distinct upstream adjoint.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &[f64]) -> Var {
    let w = tape
        .leaf_from(tape.shape(out).to_vec(), weights.to_vec())
        .expect("weights sized to output");
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum(prod)
}

/// One generic check: `build` maps a flat input vector to (tape, loss var,
/// input vars in flattening order). Analytic gradients from backward are
/// compared against central differences of the forward value.
fn check_instances(
    name: &str,
    tol: f64,
    instances: usize,
    seed: u64,
    mut build: impl FnMut(&mut ChaCha8Rng) -> (Vec<f64>, Box<dyn FnMut(&[f64]) -> (Tape, Var, Vec<Var>)>),
) -> CheckReport {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (inst as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let (x0, mut builder) = build(&mut rng);
        let (mut tape, loss, inputs) = builder(&x0);
        tape.backward(loss).expect("scalar loss");
        let mut analytic = Vec::with_capacity(x0.len());
        for v in &inputs {
            analytic.extend_from_slice(tape.grad(*v));
        }
        let fd = fd_gradient(
            &mut |xv: &[f64]| {
                let (tape, loss, _) = builder(xv);
                tape.value(loss)[0]
            },
            &x0,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    CheckReport {
        name: name.to_string(),
        instances,
        max_rel_err: worst,
        tolerance: tol,
    }
}

fn split3(x: &[f64], a: usize, b: usize) -> (&[f64], &[f64], &[f64]) {
    let (p, rest) = x.split_at(a);
    let (q, r) = rest.split_at(b);
    (p, q, r)
}

fn check_matmul(seed: u64) -> CheckReport {
    check_instances("matmul", PRIMITIVE_TOL, 10, seed, |rng| {
        let (m, k, n) = (3, 4, 2);
        let mut x0 = randn(rng, m * k);
        x0.extend(randn(rng, k * n));
        let w = randn(rng, m * n);
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let a = tape.leaf_from(vec![m, k], x[..m * k].to_vec()).unwrap();
                let b = tape.leaf_from(vec![k, n], x[m * k..].to_vec()).unwrap();
                let c = tape.matmul(a, b).unwrap();
                let loss = weighted_sum(&mut tape, c, &w);
                (tape, loss, vec![a, b])
            }),
        )
    })
}

fn check_matvec(seed: u64) -> CheckReport {
    check_instances("matvec", PRIMITIVE_TOL, 10, seed, |rng| {
        let (m, k) = (4, 3);
        let mut x0 = randn(rng, m * k);
        x0.extend(randn(rng, k));
        let w = randn(rng, m);
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let a = tape.leaf_from(vec![m, k], x[..m * k].to_vec()).unwrap();
                let v = tape.leaf_from(vec![k], x[m * k..].to_vec()).unwrap();
                let y = tape.matvec(a, v).unwrap();
                let loss = weighted_sum(&mut tape, y, &w);
                (tape, loss, vec![a, v])
            }),
        )
    })
}

fn check_conv1d(seed: u64) -> CheckReport {
    check_instances("conv1d", PRIMITIVE_TOL, 10, seed, |rng| {
        let (c_in, c_out, k, t) = (3, 2, 4, 16);
        let stride = 1 + (rng.random_range(0..3) as usize);
        let t_out = (t - k) / stride + 1;
        let mut x0 = randn(rng, c_in * t);
        x0.extend(randn(rng, c_out * c_in * k));
        x0.extend(randn(rng, c_out));
        let w = randn(rng, c_out * t_out);
        (
            x0,
            Box::new(move |x| {
                let (xi, xw, xb) = split3(x, c_in * t, c_out * c_in * k);
                let mut tape = Tape::new();
                let input = tape.leaf_from(vec![c_in, t], xi.to_vec()).unwrap();
                let kern = tape.leaf_from(vec![c_out, c_in, k], xw.to_vec()).unwrap();
                let bias = tape.leaf_from(vec![c_out], xb.to_vec()).unwrap();
                let y = tape.conv1d(input, kern, bias, stride).unwrap();
                let loss = weighted_sum(&mut tape, y, &w);
                (tape, loss, vec![input, kern, bias])
            }),
        )
    })
}

fn check_softmax(seed: u64, tau: f64) -> CheckReport {
    check_instances(&format!("softmax_tau{tau}"), PRIMITIVE_TOL, 10, seed, move |rng| {
        let n = 4;
        let x0 = randn(rng, n);
        let w = randn(rng, n);
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let v = tape.leaf_from(vec![n], x.to_vec()).unwrap();
                let y = tape.softmax(v, tau).unwrap();
                let loss = weighted_sum(&mut tape, y, &w);
                (tape, loss, vec![v])
            }),
        )
    })
}

fn check_unary(seed: u64, name: &'static str) -> CheckReport {
    check_instances(name, PRIMITIVE_TOL, 10, seed, move |rng| {
        let n = 6;
        // keep log inputs strictly positive
        let x0: Vec<f64> = if name == "log" {
            (0..n).map(|_| rng.random_range(0.2..3.0)).collect()
        } else {
            randn(rng, n)
        };
        let w = randn(rng, n);
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let v = tape.leaf_from(vec![n], x.to_vec()).unwrap();
                let y = match name {
                    "neg" => tape.neg(v),
                    "exp" => tape.exp(v),
                    "log" => tape.log(v).unwrap(),
                    "sigmoid" => tape.sigmoid(v),
                    "tanh" => tape.tanh(v),
                    "scale" => tape.scale(v, 1.7),
                    "add_scalar" => tape.add_scalar(v, -0.3),
                    other => unreachable!("{other}"),
                };
                let loss = weighted_sum(&mut tape, y, &w);
                (tape, loss, vec![v])
            }),
        )
    })
}

fn check_binary(seed: u64, name: &'static str) -> CheckReport {
    check_instances(name, PRIMITIVE_TOL, 10, seed, move |rng| {
        let n = 6;
        let mut x0 = randn(rng, n);
        x0.extend(randn(rng, n));
        let w = randn(rng, n);
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let a = tape.leaf_from(vec![n], x[..n].to_vec()).unwrap();
                let b = tape.leaf_from(vec![n], x[n..].to_vec()).unwrap();
                let y = match name {
                    "add" => tape.add(a, b).unwrap(),
                    "mul" => tape.mul(a, b).unwrap(),
                    other => unreachable!("{other}"),
                };
                let loss = weighted_sum(&mut tape, y, &w);
                (tape, loss, vec![a, b])
            }),
        )
    })
}

fn check_structural(seed: u64, name: &'static str) -> CheckReport {
    check_instances(name, PRIMITIVE_TOL, 10, seed, move |rng| {
        let (r, c) = (3, 4);
        let x0 = randn(rng, r * c);
        let w = randn(rng, r * c);
        let wv = randn(rng, c);
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let m = tape.leaf_from(vec![r, c], x.to_vec()).unwrap();
                let (loss, inputs) = match name {
                    "transpose" => {
                        let y = tape.transpose(m).unwrap();
                        (weighted_sum(&mut tape, y, &w), vec![m])
                    }
                    "reshape" => {
                        let y = tape.reshape(m, vec![c, r]).unwrap();
                        (weighted_sum(&mut tape, y, &w), vec![m])
                    }
                    "row" => {
                        let y = tape.row(m, 1).unwrap();
                        (weighted_sum(&mut tape, y, &wv), vec![m])
                    }
                    "sum" => {
                        let y = tape.sum(m);
                        (y, vec![m])
                    }
                    "mean" => {
                        let y = tape.mean(m);
                        (y, vec![m])
                    }
                    other => unreachable!("{other}"),
                };
                (tape, loss, inputs)
            }),
        )
    })
}

fn check_add_bias(seed: u64) -> CheckReport {
    check_instances("add_bias", PRIMITIVE_TOL, 10, seed, |rng| {
        let (r, c) = (3, 4);
        let mut x0 = randn(rng, r * c);
        x0.extend(randn(rng, c));
        let w = randn(rng, r * c);
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let m = tape.leaf_from(vec![r, c], x[..r * c].to_vec()).unwrap();
                let v = tape.leaf_from(vec![c], x[r * c..].to_vec()).unwrap();
                let y = tape.add_bias(m, v).unwrap();
                let loss = weighted_sum(&mut tape, y, &w);
                (tape, loss, vec![m, v])
            }),
        )
    })
}

fn check_concat_stack(seed: u64, name: &'static str) -> CheckReport {
    check_instances(name, PRIMITIVE_TOL, 10, seed, move |rng| {
        let (n1, n2) = (3, 3);
        let mut x0 = randn(rng, n1);
        x0.extend(randn(rng, n2));
        let w = randn(rng, n1 + n2);
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let a = tape.leaf_from(vec![n1], x[..n1].to_vec()).unwrap();
                let b = tape.leaf_from(vec![n2], x[n1..].to_vec()).unwrap();
                let y = match name {
                    "concat" => tape.concat(&[a, b]).unwrap(),
                    "stack_rows" => tape.stack_rows(&[a, b]).unwrap(),
                    other => unreachable!("{other}"),
                };
                let loss = weighted_sum(&mut tape, y, &w);
                (tape, loss, vec![a, b])
            }),
        )
    })
}

fn check_prelu(seed: u64) -> CheckReport {
    check_instances("prelu", PRIMITIVE_TOL, 10, seed, |rng| {
        let n = 8;
        let mut x0 = randn(rng, n);
        x0.push(rng.random_range(0.05..0.9));
        let w = randn(rng, n);
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let v = tape.leaf_from(vec![n], x[..n].to_vec()).unwrap();
                let s = tape.leaf_from(vec![1], vec![x[n]]).unwrap();
                let y = tape.prelu(v, s).unwrap();
                let loss = weighted_sum(&mut tape, y, &w);
                (tape, loss, vec![v, s])
            }),
        )
    })
}

fn check_dropout(seed: u64) -> CheckReport {
    check_instances("dropout", PRIMITIVE_TOL, 10, seed, |rng| {
        let n = 12;
        let x0 = randn(rng, n);
        let w = randn(rng, n);
        let mask_seed = rng.random::<u64>();
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                // identical mask for every evaluation of this instance
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let v = tape.leaf_from(vec![n], x.to_vec()).unwrap();
                let y = tape.dropout(v, 0.4, true, &mut mask_rng).unwrap();
                let loss = weighted_sum(&mut tape, y, &w);
                (tape, loss, vec![v])
            }),
        )
    })
}

fn gru_fixture(in_dim: usize, hidden: usize) -> (GruLayer, ParamRegistry) {
    let mut reg = ParamRegistry::new();
    let gru = GruLayer::new("gru", in_dim, hidden);
    gru.register(&mut reg);
    (gru, reg)
}

fn check_gru(seed: u64, t_len: usize, name: &'static str) -> CheckReport {
    check_instances(name, COMPOSED_TOL, 10, seed, move |rng| {
        let (in_dim, hidden) = (3, 4);
        let (_, reg) = gru_fixture(in_dim, hidden);
        let n_param: usize = reg.iter().map(|(_, p)| p.tensor.numel()).sum();
        let mut x0 = randn(rng, t_len * in_dim);
        x0.extend(randn(rng, n_param).iter().map(|v| v * 0.5));
        let w = randn(rng, hidden);
        (
            x0,
            Box::new(move |x| {
                let (gru, mut reg) = gru_fixture(in_dim, hidden);
                let mut off = t_len * in_dim;
                let names: Vec<String> = reg.names().map(str::to_string).collect();
                for pname in &names {
                    let p = reg.get_mut(pname).unwrap();
                    let n = p.tensor.numel();
                    p.tensor.data_mut().copy_from_slice(&x[off..off + n]);
                    off += n;
                }
                let mut tape = Tape::new();
                let seq = tape
                    .leaf_from(vec![t_len, in_dim], x[..t_len * in_dim].to_vec())
                    .unwrap();
                let h0 = tape.leaf(&Tensor::zeros(vec![hidden]));
                let bound = reg.bind(&mut tape);
                let (_, last) = gru.forward(&mut tape, &bound, seq, h0).unwrap();
                let loss = weighted_sum(&mut tape, last, &w);
                let mut inputs = vec![seq];
                inputs.extend(tape.bindings().iter().map(|(_, v)| *v));
                (tape, loss, inputs)
            }),
        )
    })
}

fn check_linear(seed: u64) -> CheckReport {
    check_instances("linear", PRIMITIVE_TOL, 10, seed, |rng| {
        let (batch, in_dim, out_dim) = (3, 4, 2);
        let mut x0 = randn(rng, batch * in_dim);
        x0.extend(randn(rng, out_dim * in_dim));
        x0.extend(randn(rng, out_dim));
        let w = randn(rng, batch * out_dim);
        (
            x0,
            Box::new(move |x| {
                use crate::layers::LinearLayer;
                let (xi, xw, xb) = split3(x, batch * in_dim, out_dim * in_dim);
                let mut reg = ParamRegistry::new();
                let layer = LinearLayer::new("fc", in_dim, out_dim);
                layer.register(&mut reg);
                reg.get_mut("fc.weight").unwrap().tensor.data_mut().copy_from_slice(xw);
                reg.get_mut("fc.bias").unwrap().tensor.data_mut().copy_from_slice(xb);
                let mut tape = Tape::new();
                let input = tape.leaf_from(vec![batch, in_dim], xi.to_vec()).unwrap();
                let bound = reg.bind(&mut tape);
                let y = layer.forward(&mut tape, &bound, input).unwrap();
                let loss = weighted_sum(&mut tape, y, &w);
                let mut inputs = vec![input];
                inputs.extend(tape.bindings().iter().map(|(_, v)| *v));
                (tape, loss, inputs)
            }),
        )
    })
}

fn check_loss(seed: u64, name: &'static str) -> CheckReport {
    check_instances(name, PRIMITIVE_TOL, 10, seed, move |rng| {
        let (batch, k) = (4, 4);
        let cols = if name == "loss_domain_ce" { 2 } else { k };
        let x0 = randn(rng, batch * cols);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
        let dlabels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..2)).collect();
        let mut table_rows = vec![0.0; k * k];
        for r in 0..k {
            let mut sum = 0.0;
            for c in 0..k {
                table_rows[r * k + c] = rng.random_range(0.05..1.0);
                sum += table_rows[r * k + c];
            }
            for c in 0..k {
                table_rows[r * k + c] /= sum;
            }
        }
        let table = SoftLabelTable::from_rows(k, 2.0, table_rows, "gradcheck").unwrap();
        (
            x0,
            Box::new(move |x| {
                let mut tape = Tape::new();
                let logits = tape.leaf_from(vec![batch, cols], x.to_vec()).unwrap();
                let loss = match name {
                    "loss_domain_ce" => losses::domain_ce_loss(&mut tape, logits, &dlabels).unwrap(),
                    "loss_confusion_entropy" => {
                        losses::confusion_entropy(&mut tape, logits).unwrap()
                    }
                    "loss_emotion_ce" => losses::emotion_ce_loss(&mut tape, logits, &labels).unwrap(),
                    "loss_softlabel" => {
                        let domains = vec![Domain::Target; batch];
                        losses::softlabel_loss(&mut tape, logits, &labels, &domains, &table).unwrap()
                    }
                    "loss_total" => {
                        let emo = losses::emotion_ce_loss(&mut tape, logits, &labels).unwrap();
                        let conf = losses::confusion_entropy(&mut tape, logits).unwrap();
                        let domains = vec![Domain::Target; batch];
                        let soft =
                            losses::softlabel_loss(&mut tape, logits, &labels, &domains, &table)
                                .unwrap();
                        let w = LossWeights::new(0.7, 0.3).unwrap();
                        losses::total_loss(&mut tape, emo, Some(conf), Some(soft), &w).unwrap()
                    }
                    other => unreachable!("{other}"),
                };
                (tape, loss, vec![logits])
            }),
        )
    })
}

fn sample_coords(rng: &mut ChaCha8Rng, total: usize, per_block: usize, blocks: &[usize]) -> Vec<usize> {
    // a few coordinates from every block (tensor), never out of range
    let mut coords = Vec::new();
    let mut off = 0;
    for &len in blocks {
        for _ in 0..per_block.min(len) {
            coords.push(off + rng.random_range(0..len));
        }
        off += len;
    }
    coords.sort_unstable();
    coords.dedup();
    debug_assert!(coords.iter().all(|&c| c < total));
    coords
}

/// A random valid sample with dimensions matching `cfg`, for path checks.
fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> UtteranceSample {
    let t_a = 24 + rng.random_range(0..4) as usize;
    let t_v = 2 + rng.random_range(0..4) as usize;
    let acoustic = Tensor::new(
        vec![t_a, cfg.acoustic_dim],
        randn(rng, t_a * cfg.acoustic_dim),
    )
    .unwrap();
    let visual = Tensor::new(vec![t_v, cfg.visual_dim], randn(rng, t_v * cfg.visual_dim)).unwrap();
    UtteranceSample::new(
        "gradcheck".into(),
        acoustic,
        visual,
        crate::data::Emotion::Angry,
        Domain::Source,
        crate::data::Elicitation::SynthA,
    )
    .unwrap()
}

fn check_composed_path(seed: u64, name: &'static str) -> CheckReport {
    let cfg = ModelConfig::test_profile();
    let mut worst: f64 = 0.0;
    let instances = 10;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (inst as u64).wrapping_mul(0x6a09_e667_f3bc_c909));
        let bundle = ModelBundle::new(cfg.clone(), rng.random::<u64>()).unwrap();
        let sample = random_sample(&cfg, &mut rng);

        let (reg_names, blocks, x0) = {
            let mut names = Vec::new();
            let mut blocks = Vec::new();
            let mut flat = Vec::new();
            let regs: &[&ParamRegistry] = if name == "enc_ec_path" {
                &[bundle.enc_params(), bundle.ec_params()]
            } else {
                &[bundle.enc_params(), bundle.dc_params()]
            };
            for reg in regs {
                for (pname, p) in reg.iter() {
                    names.push(pname.to_string());
                    blocks.push(p.tensor.numel());
                    flat.extend_from_slice(p.tensor.data());
                }
            }
            (names, blocks, flat)
        };
        let out_dim = if name == "enc_ec_path" {
            cfg.num_emotions
        } else {
            cfg.num_domains
        };
        let w = randn(&mut rng, out_dim);

        let eval = |x: &[f64]| -> (Tape, Var, Vec<(String, Var)>) {
            let mut b = bundle.clone();
            let mut off = 0;
            for (pname, len) in reg_names.iter().zip(&blocks) {
                let p = b
                    .enc_params_mut()
                    .get_mut(pname)
                    .or_else(|| b.ec_params_mut().get_mut(pname))
                    .or_else(|| b.dc_params_mut().get_mut(pname))
                    .unwrap();
                p.tensor.data_mut().copy_from_slice(&x[off..off + len]);
                off += len;
            }
            let mut tape = Tape::new();
            let bound_enc = b.enc_params().bind(&mut tape);
            let repr = b.encode(&mut tape, &bound_enc, &sample, None).unwrap();
            let logits = if name == "enc_ec_path" {
                let bound = b.ec_params().bind(&mut tape);
                b.emotion_logits(&mut tape, &bound, repr).unwrap()
            } else {
                let bound = b.dc_params().bind(&mut tape);
                b.domain_logits(&mut tape, &bound, repr).unwrap()
            };
            let loss = weighted_sum(&mut tape, logits, &w);
            let bindings = tape.bindings().to_vec();
            (tape, loss, bindings)
        };

        let (mut tape, loss, bindings) = eval(&x0);
        tape.backward(loss).unwrap();
        let mut analytic_full = vec![0.0; x0.len()];
        {
            let mut off = 0;
            for (pname, len) in reg_names.iter().zip(&blocks) {
                let var = bindings
                    .iter()
                    .find(|(n, _)| n == pname)
                    .map(|(_, v)| *v)
                    .unwrap();
                analytic_full[off..off + len].copy_from_slice(tape.grad(var));
                off += len;
            }
        }
        let coords = sample_coords(&mut rng, x0.len(), 6, &blocks);
        let fd = fd_gradient_coords(
            &mut |xv: &[f64]| {
                let (tape, loss, _) = eval(xv);
                tape.value(loss)[0]
            },
            &x0,
            FD_STEP,
            &coords,
        );
        let analytic: Vec<f64> = coords.iter().map(|&c| analytic_full[c]).collect();
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    CheckReport {
        name: name.to_string(),
        instances,
        max_rel_err: worst,
        tolerance: COMPOSED_TOL,
    }
}

/// Runs every finite-difference check. Deterministic for a given seed.
pub fn run_full_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = vec![
        check_matmul(seed),
        check_matvec(seed.wrapping_add(1)),
        check_conv1d(seed.wrapping_add(2)),
        check_linear(seed.wrapping_add(3)),
        check_prelu(seed.wrapping_add(4)),
        check_softmax(seed.wrapping_add(5), 1.0),
        check_softmax(seed.wrapping_add(6), 2.0),
        check_add_bias(seed.wrapping_add(7)),
        check_dropout(seed.wrapping_add(8)),
    ];
    for name in ["add", "mul"] {
        reports.push(check_binary(seed.wrapping_add(9), name));
    }
    for name in ["neg", "exp", "log", "sigmoid", "tanh", "scale", "add_scalar"] {
        reports.push(check_unary(seed.wrapping_add(10), name));
    }
    for name in ["transpose", "reshape", "row", "sum", "mean"] {
        reports.push(check_structural(seed.wrapping_add(11), name));
    }
    for name in ["concat", "stack_rows"] {
        reports.push(check_concat_stack(seed.wrapping_add(12), name));
    }
    reports.push(check_gru(seed.wrapping_add(13), 1, "gru_step"));
    reports.push(check_gru(seed.wrapping_add(14), 5, "gru_unroll"));
    for name in [
        "loss_domain_ce",
        "loss_confusion_entropy",
        "loss_emotion_ce",
        "loss_softlabel",
        "loss_total",
    ] {
        reports.push(check_loss(seed.wrapping_add(15), name));
    }
    reports.push(check_composed_path(seed.wrapping_add(16), "enc_ec_path"));
    reports.push(check_composed_path(seed.wrapping_add(17), "enc_dc_path"));
    Ok(reports)
}
