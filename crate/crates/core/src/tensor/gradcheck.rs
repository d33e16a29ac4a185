//! Central-difference verification of every analytic gradient.
//!
//! Checks run in the 64-bit shadow mode. Each case builds a small random
//! instance, takes analytic gradients with one backward pass, then perturbs
//! every checked element by `±step` and compares against the central
//! difference. The reported figure is
//! `max |analytic - numeric| / max(1, |numeric|)` over all trials.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, PadMode, ParamSet, RollMatchSpec, Workspace};
use super::{Result, Tensor};
use crate::rng;

pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_STEP: f64 = 1e-3;
/// Pass threshold for the acceptance gate.
pub const PASS_THRESHOLD: f64 = 1e-4;

/// Which tensors of an instance get checked.
enum Target {
    Input(NodeId),
    Param(usize),
}

struct Instance {
    graph: Graph,
    params: ParamSet<f64>,
    bindings: Vec<(NodeId, Tensor<f64>)>,
    loss: NodeId,
    targets: Vec<Target>,
}

pub struct CheckCase {
    pub name: &'static str,
    build: fn(&mut ChaCha8Rng) -> Instance,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
}

fn randn_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, rng::randn_vec(rng, n)).unwrap()
}

/// Random values kept away from the relu kink.
fn randn_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = randn_t(rng, shape);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v += if *v >= 0.0 { margin } else { -margin };
        }
    }
    t
}

/// Random non-negative weights normalized to sum 1.
fn rand_weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = randn_t(rng, shape);
    for v in t.data_mut() {
        *v = v.abs() + 0.05;
    }
    let s = t.sum();
    for v in t.data_mut() {
        *v /= s;
    }
    t
}

/// Widens the winning-channel margin so finite differences never flip argmax.
fn widen_channel_margins(t: &mut Tensor<f64>, margin: f64) {
    let c = *t.shape().last().unwrap();
    let pixels = t.numel() / c;
    for p in 0..pixels {
        let xs = &mut t.data_mut()[p * c..(p + 1) * c];
        let mut best = 0;
        for i in 1..c {
            if xs[i] > xs[best] {
                best = i;
            }
        }
        xs[best] += margin;
    }
}

fn eval_loss(inst: &Instance, bindings: &[(NodeId, Tensor<f64>)], params: &ParamSet<f64>) -> f64 {
    let mut ws = Workspace::new(&inst.graph);
    for (id, t) in bindings {
        ws.set_input(&inst.graph, *id, t.clone()).unwrap();
    }
    inst.graph
        .forward(&mut ws, params, &[inst.loss])
        .expect("gradcheck forward failed");
    ws.value(inst.loss).unwrap().data()[0]
}

/// Max relative error of one case over `trials` random instances.
pub fn grad_check(case: &CheckCase, trials: usize, step: f64, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = rng::stream(seed, case.name, trial as u64);
        let inst = (case.build)(&mut rng);

        let mut ws = Workspace::new(&inst.graph);
        for (id, t) in &inst.bindings {
            ws.set_input(&inst.graph, *id, t.clone())?;
        }
        inst.graph.forward(&mut ws, &inst.params, &[inst.loss])?;
        inst.graph.backward(&mut ws, &inst.params, inst.loss)?;

        for target in &inst.targets {
            let (analytic, numel) = match target {
                Target::Input(id) => {
                    let g = ws.grad(*id).expect("input grad missing").clone();
                    let n = g.numel();
                    (g, n)
                }
                Target::Param(pid) => {
                    let node = inst.graph.params()[*pid].node;
                    let g = ws.grad(node).expect("param grad missing").clone();
                    let n = g.numel();
                    (g, n)
                }
            };
            for e in 0..numel {
                let numeric = match target {
                    Target::Input(id) => {
                        let mut bindings = inst.bindings.clone();
                        let slot = bindings.iter_mut().find(|(bid, _)| bid == id).unwrap();
                        let orig = slot.1.data()[e];
                        slot.1.data_mut()[e] = orig + step;
                        let fp = eval_loss(&inst, &bindings, &inst.params);
                        let slot = bindings.iter_mut().find(|(bid, _)| bid == id).unwrap();
                        slot.1.data_mut()[e] = orig - step;
                        let fm = eval_loss(&inst, &bindings, &inst.params);
                        (fp - fm) / (2.0 * step)
                    }
                    Target::Param(pid) => {
                        let mut params = inst.params.clone();
                        let orig = params.tensors[*pid].data()[e];
                        params.tensors[*pid].data_mut()[e] = orig + step;
                        let fp = eval_loss(&inst, &inst.bindings, &params);
                        params.tensors[*pid].data_mut()[e] = orig - step;
                        let fm = eval_loss(&inst, &inst.bindings, &params);
                        (fp - fm) / (2.0 * step)
                    }
                };
                let rel = (analytic.data()[e] - numeric).abs() / numeric.abs().max(1.0);
                if rel > worst {
                    worst = rel;
                }
            }
        }
    }
    Ok(worst)
}

/// Runs the whole suite; one entry per primitive and per loss.
pub fn run_suite(trials: usize, step: f64, seed: u64) -> Result<Vec<CheckReport>> {
    default_cases()
        .iter()
        .map(|case| {
            grad_check(case, trials, step, seed).map(|err| CheckReport {
                name: case.name.to_string(),
                max_rel_error: err,
            })
        })
        .collect()
}

macro_rules! case {
    ($name:literal, $rng:ident, $body:block) => {
        CheckCase {
            name: $name,
            build: |$rng: &mut ChaCha8Rng| -> Instance { $body },
        }
    };
}

fn conv_case(rng: &mut ChaCha8Rng, pad: PadMode, stride: usize) -> Instance {
    let mut g = Graph::new();
    let x = g.input(&[4, 4, 2]).unwrap();
    let k = g.param("k", &[3, 3, 2, 3]).unwrap();
    let b = g.param("b", &[3]).unwrap();
    let y = g.conv2d(x, k, Some(b), pad, stride).unwrap();
    let oh = 4usize.div_ceil(stride);
    let c = g.input(&[oh, oh, 3]).unwrap();
    let loss = g.dot_const(y, c).unwrap();
    let params = ParamSet {
        tensors: vec![randn_t(rng, &[3, 3, 2, 3]), randn_t(rng, &[3])],
    };
    Instance {
        bindings: vec![(x, randn_t(rng, &[4, 4, 2])), (c, randn_t(rng, &[oh, oh, 3]))],
        graph: g,
        params,
        loss,
        targets: vec![Target::Input(x), Target::Param(0), Target::Param(1)],
    }
}

pub fn default_cases() -> Vec<CheckCase> {
    vec![
        case!("conv2d_zero_s1", rng, { conv_case(rng, PadMode::Zero, 1) }),
        case!("conv2d_zero_s2", rng, { conv_case(rng, PadMode::Zero, 2) }),
        case!("conv2d_circular_s1", rng, {
            conv_case(rng, PadMode::CircularHorizontal, 1)
        }),
        case!("conv2d_circular_s2", rng, {
            conv_case(rng, PadMode::CircularHorizontal, 2)
        }),
        case!("deconv2d", rng, {
            let mut g = Graph::new();
            let x = g.input(&[2, 2, 3]).unwrap();
            let k = g.param("k", &[3, 3, 2, 3]).unwrap();
            let b = g.param("b", &[2]).unwrap();
            let y = g.deconv2d(x, k, Some(b)).unwrap();
            let c = g.input(&[4, 4, 2]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            let params = ParamSet {
                tensors: vec![randn_t(rng, &[3, 3, 2, 3]), randn_t(rng, &[2])],
            };
            Instance {
                bindings: vec![(x, randn_t(rng, &[2, 2, 3])), (c, randn_t(rng, &[4, 4, 2]))],
                graph: g,
                params,
                loss,
                targets: vec![Target::Input(x), Target::Param(0), Target::Param(1)],
            }
        }),
        case!("dense", rng, {
            let mut g = Graph::new();
            let x = g.input(&[3, 5]).unwrap();
            let w = g.param("w", &[5, 4]).unwrap();
            let b = g.param("b", &[4]).unwrap();
            let y = g.dense(x, w, Some(b)).unwrap();
            let c = g.input(&[3, 4]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            let params = ParamSet {
                tensors: vec![randn_t(rng, &[5, 4]), randn_t(rng, &[4])],
            };
            Instance {
                bindings: vec![(x, randn_t(rng, &[3, 5])), (c, randn_t(rng, &[3, 4]))],
                graph: g,
                params,
                loss,
                targets: vec![Target::Input(x), Target::Param(0), Target::Param(1)],
            }
        }),
        case!("relu", rng, {
            let mut g = Graph::new();
            let x = g.input(&[4, 4, 2]).unwrap();
            let y = g.relu(x).unwrap();
            let c = g.input(&[4, 4, 2]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            Instance {
                bindings: vec![
                    (x, randn_away_from_zero(rng, &[4, 4, 2], 0.05)),
                    (c, randn_t(rng, &[4, 4, 2])),
                ],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("softmax_over_all_pixels", rng, {
            let mut g = Graph::new();
            let x = g.input(&[3, 3]).unwrap();
            let y = g.softmax_all(x).unwrap();
            let c = g.input(&[3, 3]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            Instance {
                bindings: vec![(x, randn_t(rng, &[3, 3])), (c, randn_t(rng, &[3, 3]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("l2_normalize_along_channels", rng, {
            let mut g = Graph::new();
            let x = g.input(&[2, 2, 4]).unwrap();
            let y = g.l2norm_channels(x).unwrap();
            let c = g.input(&[2, 2, 4]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            // Keep pixel norms comfortably away from the degenerate zero case.
            let mut xt = randn_t(rng, &[2, 2, 4]);
            for p in 0..4 {
                let n2: f64 = xt.data()[p * 4..(p + 1) * 4].iter().map(|v| v * v).sum();
                if n2 < 0.25 {
                    xt.data_mut()[p * 4] += 1.0;
                }
            }
            Instance {
                bindings: vec![(x, xt), (c, randn_t(rng, &[2, 2, 4]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("max_over_channels", rng, {
            let mut g = Graph::new();
            let x = g.input(&[3, 3, 4]).unwrap();
            let y = g.max_channels(x, None).unwrap();
            let c = g.input(&[3, 3, 1]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            let mut xt = randn_t(rng, &[3, 3, 4]);
            widen_channel_margins(&mut xt, 0.1);
            Instance {
                bindings: vec![(x, xt), (c, randn_t(rng, &[3, 3, 1]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("max_over_channels_masked", rng, {
            let mut g = Graph::new();
            let x = g.input(&[2, 2, 4]).unwrap();
            let m = g.input(&[4]).unwrap();
            let y = g.max_channels(x, Some(m)).unwrap();
            let c = g.input(&[2, 2, 1]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            let mut xt = randn_t(rng, &[2, 2, 4]);
            // Make the retained-channel winner unambiguous: channels 1 and 3
            // are masked out, so widen margins within {0, 2}.
            for p in 0..4 {
                let xs = &mut xt.data_mut()[p * 4..(p + 1) * 4];
                if xs[0] > xs[2] {
                    xs[0] += 0.1;
                } else {
                    xs[2] += 0.1;
                }
            }
            let mask = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
            Instance {
                bindings: vec![(x, xt), (m, mask), (c, randn_t(rng, &[2, 2, 1]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("concat_along_channels", rng, {
            let mut g = Graph::new();
            let a = g.input(&[2, 3, 2]).unwrap();
            let b = g.input(&[2, 3, 3]).unwrap();
            let y = g.concat_channels(&[a, b]).unwrap();
            let c = g.input(&[2, 3, 5]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            Instance {
                bindings: vec![
                    (a, randn_t(rng, &[2, 3, 2])),
                    (b, randn_t(rng, &[2, 3, 3])),
                    (c, randn_t(rng, &[2, 3, 5])),
                ],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(a), Target::Input(b)],
            }
        }),
        case!("roll_vector", rng, {
            let mut g = Graph::new();
            let x = g.input(&[6]).unwrap();
            let y = g.roll(x, 2).unwrap();
            let c = g.input(&[6]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            Instance {
                bindings: vec![(x, randn_t(rng, &[6])), (c, randn_t(rng, &[6]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("cosine_similarity", rng, {
            let mut g = Graph::new();
            let a = g.input(&[5]).unwrap();
            let b = g.input(&[5]).unwrap();
            let loss = g.cosine_sim(a, b).unwrap();
            let at = randn_away_from_zero(rng, &[5], 0.2);
            let bt = randn_away_from_zero(rng, &[5], 0.2);
            Instance {
                bindings: vec![(a, at), (b, bt)],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(a), Target::Input(b)],
            }
        }),
        case!("cosine_similarity_parallel", rng, {
            let mut g = Graph::new();
            let a = g.input(&[5]).unwrap();
            let b = g.input(&[5]).unwrap();
            let loss = g.cosine_sim(a, b).unwrap();
            let mut v = randn_t(rng, &[5]);
            let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(0.3);
            for x in v.data_mut() {
                *x /= n;
            }
            Instance {
                bindings: vec![(a, v.clone()), (b, v)],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(a), Target::Input(b)],
            }
        }),
        case!("reshape", rng, {
            let mut g = Graph::new();
            let x = g.input(&[2, 6]).unwrap();
            let y = g.reshape(x, &[3, 4]).unwrap();
            let c = g.input(&[3, 4]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            Instance {
                bindings: vec![(x, randn_t(rng, &[2, 6])), (c, randn_t(rng, &[3, 4]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("gather", rng, {
            let mut g = Graph::new();
            let x = g.input(&[6]).unwrap();
            let idx = Arc::new(vec![0u32, 5, 2, 2, 4, 1, 3, 0]);
            let y = g.gather(x, idx, &[8]).unwrap();
            let c = g.input(&[8]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            Instance {
                bindings: vec![(x, randn_t(rng, &[6])), (c, randn_t(rng, &[8]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("scalar_weighted_sum", rng, {
            let mut g = Graph::new();
            let a = g.input(&[1]).unwrap();
            let b = g.input(&[1]).unwrap();
            let c = g.input(&[1]).unwrap();
            let loss = g.weighted_sum(&[a, b, c], &[1.0, 10.0, 1e4]).unwrap();
            Instance {
                bindings: vec![
                    (a, randn_t(rng, &[1])),
                    (b, randn_t(rng, &[1])),
                    (c, randn_t(rng, &[1])),
                ],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(a), Target::Input(b), Target::Input(c)],
            }
        }),
        case!("roll_match", rng, {
            let mut g = Graph::new();
            let gr = g.input(&[8]).unwrap();
            let ae = g.input(&[2, 2, 8]).unwrap();
            let y = g
                .roll_match(
                    gr,
                    ae,
                    RollMatchSpec {
                        r_bins: 4,
                        step: 2,
                        crop_start: 0,
                        crop_len: 8,
                    },
                )
                .unwrap();
            let c = g.input(&[2, 2, 4]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            Instance {
                bindings: vec![
                    (gr, randn_away_from_zero(rng, &[8], 0.1)),
                    (ae, randn_away_from_zero(rng, &[2, 2, 8], 0.1)),
                    (c, randn_t(rng, &[2, 2, 4])),
                ],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(gr), Target::Input(ae)],
            }
        }),
        case!("roll_match_fov_crop", rng, {
            let mut g = Graph::new();
            let gr = g.input(&[4]).unwrap();
            let ae = g.input(&[2, 2, 8]).unwrap();
            let y = g
                .roll_match(
                    gr,
                    ae,
                    RollMatchSpec {
                        r_bins: 4,
                        step: 2,
                        crop_start: 2,
                        crop_len: 4,
                    },
                )
                .unwrap();
            let c = g.input(&[2, 2, 4]).unwrap();
            let loss = g.dot_const(y, c).unwrap();
            Instance {
                bindings: vec![
                    (gr, randn_away_from_zero(rng, &[4], 0.1)),
                    (ae, randn_away_from_zero(rng, &[2, 2, 8], 0.1)),
                    (c, randn_t(rng, &[2, 2, 4])),
                ],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(gr), Target::Input(ae)],
            }
        }),
        case!("infonce_level", rng, {
            let mut g = Graph::new();
            let s = g.input(&[2, 2, 4]).unwrap();
            let w = g.input(&[2, 2, 4]).unwrap();
            let loss = g.infonce(s, w, 0.1).unwrap();
            Instance {
                bindings: vec![(s, randn_t(rng, &[2, 2, 4])), (w, rand_weights(rng, &[2, 2, 4]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(s)],
            }
        }),
        case!("softmax_cross_entropy", rng, {
            let mut g = Graph::new();
            let x = g.input(&[4, 4]).unwrap();
            let d = g.softmax_all(x).unwrap();
            let dgt = g.input(&[4, 4]).unwrap();
            let loss = g.cross_entropy(d, dgt).unwrap();
            Instance {
                bindings: vec![(x, randn_t(rng, &[4, 4])), (dgt, rand_weights(rng, &[4, 4]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("cross_entropy_direct", rng, {
            let mut g = Graph::new();
            let d = g.input(&[3, 3]).unwrap();
            let dgt = g.input(&[3, 3]).unwrap();
            let loss = g.cross_entropy(d, dgt).unwrap();
            let mut dt = randn_t(rng, &[3, 3]);
            for v in dt.data_mut() {
                *v = v.abs() + 0.1;
            }
            Instance {
                bindings: vec![(d, dt), (dgt, rand_weights(rng, &[3, 3]))],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(d)],
            }
        }),
        case!("wasserstein_loss", rng, {
            let mut g = Graph::new();
            let x = g.input(&[4, 4]).unwrap();
            let d = g.softmax_all(x).unwrap();
            let dist = g.input(&[4, 4]).unwrap();
            let loss = g.dot_const(d, dist).unwrap();
            let mut dm = randn_t(rng, &[4, 4]);
            for v in dm.data_mut() {
                *v = v.abs() * 3.0;
            }
            Instance {
                bindings: vec![(x, randn_t(rng, &[4, 4])), (dist, dm)],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x)],
            }
        }),
        case!("orientation_loss", rng, {
            let mut g = Graph::new();
            let raw = g.input(&[3, 3, 2]).unwrap();
            let y = g.l2norm_channels(raw).unwrap();
            let dgt = g.input(&[3, 3]).unwrap();
            let trig = g.input(&[2]).unwrap();
            let loss = g.orientation_loss(y, dgt, trig).unwrap();
            let mut rt = randn_t(rng, &[3, 3, 2]);
            for p in 0..9 {
                let n2: f64 = rt.data()[p * 2..(p + 1) * 2].iter().map(|v| v * v).sum();
                if n2 < 0.25 {
                    rt.data_mut()[p * 2] += 1.0;
                }
            }
            let ang = rng::randn(rng);
            let trig_t = Tensor::from_vec(&[2], vec![ang.cos(), ang.sin()]).unwrap();
            Instance {
                bindings: vec![(raw, rt), (dgt, rand_weights(rng, &[3, 3])), (trig, trig_t)],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(raw)],
            }
        }),
        case!("total_loss_composite", rng, {
            // Nonlinear end-to-end composite: CE + orientation + infoNCE.
            let mut g = Graph::new();
            let x = g.input(&[3, 3]).unwrap();
            let d = g.softmax_all(x).unwrap();
            let dgt2 = g.input(&[3, 3]).unwrap();
            let ld = g.cross_entropy(d, dgt2).unwrap();
            let raw = g.input(&[3, 3, 2]).unwrap();
            let y = g.l2norm_channels(raw).unwrap();
            let dgt = g.input(&[3, 3]).unwrap();
            let trig = g.input(&[2]).unwrap();
            let ly = g.orientation_loss(y, dgt, trig).unwrap();
            let s = g.input(&[2, 2, 2]).unwrap();
            let w = g.input(&[2, 2, 2]).unwrap();
            let lm = g.infonce(s, w, 0.1).unwrap();
            let loss = g.weighted_sum(&[ld, ly, lm], &[1.0, 2.0, 3.0]).unwrap();
            let mut rt = randn_t(rng, &[3, 3, 2]);
            for p in 0..9 {
                let n2: f64 = rt.data()[p * 2..(p + 1) * 2].iter().map(|v| v * v).sum();
                if n2 < 0.25 {
                    rt.data_mut()[p * 2] += 1.0;
                }
            }
            let labels = rand_weights(rng, &[3, 3]);
            Instance {
                bindings: vec![
                    (x, randn_t(rng, &[3, 3])),
                    (dgt2, labels.clone()),
                    (raw, rt),
                    (dgt, labels),
                    (trig, Tensor::from_vec(&[2], vec![0.6, 0.8]).unwrap()),
                    (s, randn_t(rng, &[2, 2, 2])),
                    (w, rand_weights(rng, &[2, 2, 2])),
                ],
                graph: g,
                params: ParamSet { tensors: vec![] },
                loss,
                targets: vec![Target::Input(x), Target::Input(raw), Target::Input(s)],
            }
        }),
        case!("matching_upsample_pipeline", rng, {
            // Aerial feature -> conv -> descriptor map; rolled matching scores
            // concatenated with the normalized map and upsampled.
            let mut g = Graph::new();
            let feat = g.input(&[4, 4, 2]).unwrap();
            let k = g.param("k", &[3, 3, 2, 4]).unwrap();
            let amap = g.conv2d(feat, k, None, PadMode::Zero, 2).unwrap();
            let gr = g.input(&[4]).unwrap();
            let scores = g
                .roll_match(
                    gr,
                    amap,
                    RollMatchSpec {
                        r_bins: 2,
                        step: 2,
                        crop_start: 0,
                        crop_len: 4,
                    },
                )
                .unwrap();
            let normed = g.l2norm_channels(amap).unwrap();
            let cat = g.concat_channels(&[scores, normed]).unwrap();
            let kd = g.param("kd", &[3, 3, 2, 6]).unwrap();
            let up = g.deconv2d(cat, kd, None).unwrap();
            let c = g.input(&[4, 4, 2]).unwrap();
            let loss = g.dot_const(up, c).unwrap();
            let params = ParamSet {
                tensors: vec![randn_t(rng, &[3, 3, 2, 4]), randn_t(rng, &[3, 3, 2, 6])],
            };
            Instance {
                bindings: vec![
                    (feat, randn_away_from_zero(rng, &[4, 4, 2], 0.1)),
                    (gr, randn_away_from_zero(rng, &[4], 0.2)),
                    (c, randn_t(rng, &[4, 4, 2])),
                ],
                graph: g,
                params,
                loss,
                targets: vec![
                    Target::Input(feat),
                    Target::Input(gr),
                    Target::Param(0),
                    Target::Param(1),
                ],
            }
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_gradients_are_nearly_exact() {
        let case = default_cases()
            .into_iter()
            .find(|c| c.name == "dense")
            .unwrap();
        let err = grad_check(&case, 20, DEFAULT_STEP, 11).unwrap();
        assert!(err < 1e-6, "dense max rel error {err}");
    }

    #[test]
    fn cosine_parallel_case_passes() {
        let case = default_cases()
            .into_iter()
            .find(|c| c.name == "cosine_similarity_parallel")
            .unwrap();
        let err = grad_check(&case, 20, DEFAULT_STEP, 13).unwrap();
        assert!(err < 1e-4, "parallel cosine max rel error {err}");
    }
}
