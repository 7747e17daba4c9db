//! Central finite-difference verification of every backward rule, from the
//! primitive ops up to the composed network losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, domain_confusion, feature_distill, logits_distill, MarginMode, MarginState,
};
use crate::nets::{Activation, LayerSpec, NetworkSpec, NetworkState, RegressorState};
use crate::tensor::{SoftmaxConvention, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Scalar loss of some inputs, returning the value and the analytic gradient
/// for each input tensor. Implementations rebuild their tape per call.
pub type EvalFn = dyn Fn(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>;

/// One finite-difference comparison instance: inputs, the function, and the
/// factor relating the analytic gradient to the true derivative (1 for
/// ordinary ops, `-lambda` under gradient reversal).
pub struct CheckCase {
    pub inputs: Vec<Tensor>,
    pub eval: Box<EvalFn>,
    pub scale: f64,
}

/// A named family of check cases, one fresh case per instance seed.
pub struct CheckSpec {
    pub name: &'static str,
    pub gen: Box<dyn Fn(u64) -> CheckCase>,
}

/// Worst relative error over a family's instances.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compare the analytic gradients of `case.eval` against central finite
/// differences with the given step; returns the worst relative error.
pub fn finite_diff(case: &CheckCase, step: f64) -> Result<f64> {
    let (_, grads) = (case.eval)(&case.inputs)?;
    if grads.len() != case.inputs.len() {
        return Err(Error::Config(format!(
            "eval returned {} gradients for {} inputs",
            grads.len(),
            case.inputs.len()
        )));
    }
    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        if grads[i].len() != input.data.len() {
            return Err(Error::Config(format!(
                "gradient {i} has {} entries for {} values",
                grads[i].len(),
                input.data.len()
            )));
        }
        for j in 0..input.data.len() {
            let mut plus = case.inputs.to_vec();
            plus[i].data[j] += step;
            let (vp, _) = (case.eval)(&plus)?;
            let mut minus = case.inputs.to_vec();
            minus[i].data[j] -= step;
            let (vm, _) = (case.eval)(&minus)?;
            let numeric = case.scale * (vp - vm) / (2.0 * step);
            worst = worst.max(rel_err(grads[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Run `instances` random cases of every registered family.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    run_checks(&standard_checks(), instances, seed)
}

pub fn run_checks(
    checks: &[CheckSpec],
    instances: usize,
    seed: u64,
) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(checks.len());
    for (ci, check) in checks.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..instances {
            let case = (check.gen)(seed ^ ((ci as u64) << 32) ^ k as u64);
            worst = worst.max(finite_diff(&case, DEFAULT_STEP)?);
        }
        out.push(CheckOutcome {
            name: check.name.to_string(),
            instances,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::param(shape, data).expect("finite random tensor")
}

/// Random values bounded away from the given kink locations.
fn rand_away_from(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    kinks: impl Fn(usize) -> f64,
    margin: f64,
) -> Tensor {
    let n: usize = shape.iter().product();
    let cols = *shape.last().expect("nonempty shape");
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let k = kinks(i % cols);
            let mut v = rng.gen_range(-2.0..2.0);
            while (v - k).abs() < margin {
                v = rng.gen_range(-2.0..2.0);
            }
            v
        })
        .collect();
    Tensor::param(shape, data).expect("finite random tensor")
}

/// Weighted sum against fixed random weights so non-scalar ops reduce to a
/// scalar without losing per-element gradient information.
fn scalarize(tape: &mut Tape, v: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(shape, weights[..n].to_vec())?;
    let prod = tape.mul(v, w)?;
    Ok(tape.reduce_sum(prod))
}

fn rand_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Evaluate a tape-building closure and pull analytic gradients for every
/// input leaf.
fn eval_with_tape(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars)?;
    let value = tape.data(out)[0];
    let grads = tape.backward(out)?;
    let out = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .wrt(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.data.len()])
        })
        .collect();
    Ok((value, out))
}

fn binary_elementwise(
    name: &'static str,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> CheckSpec {
    CheckSpec {
        name,
        gen: Box::new(move |seed| {
            let mut rng = rng_for(seed);
            let a = rand_tensor(&mut rng, vec![3, 2], -2.0, 2.0);
            let b = rand_tensor(&mut rng, vec![3, 2], -2.0, 2.0);
            let w = rand_weights(&mut rng, 6);
            CheckCase {
                inputs: vec![a, b],
                eval: Box::new(move |ins| {
                    eval_with_tape(ins, |tape, vars| {
                        let v = op(tape, vars[0], vars[1])?;
                        scalarize(tape, v, &w)
                    })
                }),
                scale: 1.0,
            }
        }),
    }
}

fn unary(
    name: &'static str,
    sample: fn(&mut ChaCha8Rng) -> Tensor,
    op: fn(&mut Tape, Var) -> Var,
) -> CheckSpec {
    CheckSpec {
        name,
        gen: Box::new(move |seed| {
            let mut rng = rng_for(seed);
            let a = sample(&mut rng);
            let w = rand_weights(&mut rng, a.data.len());
            CheckCase {
                inputs: vec![a],
                eval: Box::new(move |ins| {
                    eval_with_tape(ins, |tape, vars| {
                        let v = op(tape, vars[0]);
                        scalarize(tape, v, &w)
                    })
                }),
                scale: 1.0,
            }
        }),
    }
}

fn state_from(inputs: &[Tensor], layout: &[(usize, usize)]) -> NetworkState {
    let layers = layout
        .iter()
        .enumerate()
        .map(|(i, _)| (inputs[2 * i].clone(), inputs[2 * i + 1].clone()))
        .collect();
    NetworkState {
        layers,
        init_seed: 0,
    }
}

/// Evaluate a loss built around a network whose parameters are the checked
/// inputs; gradients come back in `inputs` order (w0, b0, w1, b1, ...).
fn eval_network_loss(
    inputs: &[Tensor],
    layout: &[(usize, usize)],
    build: impl Fn(&mut Tape, &NetworkState) -> Result<Var>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let state = state_from(inputs, layout);
    let mut tape = Tape::new();
    let out = build(&mut tape, &state)?;
    let value = tape.data(out)[0];
    let grads = tape.backward(out)?;
    let gvec = state
        .params()
        .iter()
        .map(|p| {
            tape.leaf_of(p)
                .and_then(|v| grads.wrt(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.data.len()])
        })
        .collect();
    Ok((value, gvec))
}

/// Smallest absolute first-layer pre-activation over the given batches; used
/// to keep finite differences away from the hidden ReLU kinks.
fn min_preactivation(params: &[Tensor], batches: &[&Tensor]) -> f64 {
    let w = &params[0];
    let b = &params[1];
    let (d, h) = (w.shape[0], w.shape[1]);
    let mut min = f64::INFINITY;
    for batch in batches {
        for row in batch.data.chunks(d) {
            for j in 0..h {
                let z: f64 = b.data[j]
                    + row.iter().enumerate().map(|(k, &x)| x * w.data[k * h + j]).sum::<f64>();
                min = min.min(z.abs());
            }
        }
    }
    min
}

fn two_layer_spec(input: usize, hidden: usize, classes: usize) -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec {
                in_dim: input,
                out_dim: hidden,
                activation: Activation::Relu,
            },
            LayerSpec {
                in_dim: hidden,
                out_dim: classes,
                activation: Activation::None,
            },
        ],
        tap_layers: vec![0],
        class_count: classes,
    }
}

fn rand_layer_params(rng: &mut ChaCha8Rng, layout: &[(usize, usize)]) -> Vec<Tensor> {
    let mut out = Vec::new();
    for &(i, o) in layout {
        out.push(rand_tensor(rng, vec![i, o], -0.8, 0.8));
        out.push(rand_tensor(rng, vec![o], -0.3, 0.3));
    }
    out
}

/// Every primitive op and loss with a backward rule, as finite-difference
/// check families.
pub fn standard_checks() -> Vec<CheckSpec> {
    let mut checks = vec![
        binary_elementwise("add", |t, a, b| t.add(a, b)),
        binary_elementwise("sub", |t, a, b| t.sub(a, b)),
        binary_elementwise("mul", |t, a, b| t.mul(a, b)),
        CheckSpec {
            name: "scalar_mul",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let a = rand_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
                let c: f64 = rng.gen_range(-2.0..2.0);
                let w = rand_weights(&mut rng, 6);
                CheckCase {
                    inputs: vec![a],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            let v = tape.scalar_mul(vars[0], c);
                            scalarize(tape, v, &w)
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "matmul",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let a = rand_tensor(&mut rng, vec![3, 2], -2.0, 2.0);
                let b = rand_tensor(&mut rng, vec![2, 4], -2.0, 2.0);
                let w = rand_weights(&mut rng, 12);
                CheckCase {
                    inputs: vec![a, b],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            let v = tape.matmul(vars[0], vars[1])?;
                            scalarize(tape, v, &w)
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "add_bias",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let a = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
                let b = rand_tensor(&mut rng, vec![4], -2.0, 2.0);
                let w = rand_weights(&mut rng, 12);
                CheckCase {
                    inputs: vec![a, b],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            let v = tape.add_bias(vars[0], vars[1])?;
                            scalarize(tape, v, &w)
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        unary(
            "relu",
            |rng| rand_away_from(rng, vec![3, 4], |_| 0.0, 0.05),
            |t, v| t.relu(v),
        ),
        unary(
            "exp",
            |rng| rand_tensor(rng, vec![3, 2], -2.0, 2.0),
            |t, v| t.exp(v),
        ),
        unary(
            "log",
            |rng| rand_tensor(rng, vec![3, 2], 0.3, 3.0),
            |t, v| t.log(v),
        ),
        unary(
            "reduce_sum",
            |rng| rand_tensor(rng, vec![3, 4], -2.0, 2.0),
            |t, v| t.reduce_sum(v),
        ),
        unary(
            "reduce_mean",
            |rng| rand_tensor(rng, vec![3, 4], -2.0, 2.0),
            |t, v| t.reduce_mean(v),
        ),
        CheckSpec {
            name: "concat_rows",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let a = rand_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
                let b = rand_tensor(&mut rng, vec![3, 3], -2.0, 2.0);
                let w = rand_weights(&mut rng, 15);
                CheckCase {
                    inputs: vec![a, b],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            let v = tape.concat_rows(vars[0], vars[1])?;
                            scalarize(tape, v, &w)
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "reshape",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let a = rand_tensor(&mut rng, vec![2, 6], -2.0, 2.0);
                let w = rand_weights(&mut rng, 12);
                CheckCase {
                    inputs: vec![a],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            let v = tape.reshape(vars[0], vec![3, 4])?;
                            scalarize(tape, v, &w)
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        unary(
            "squared_l2_norm",
            |rng| rand_tensor(rng, vec![3, 2], -2.0, 2.0),
            |t, v| t.squared_l2_norm(v),
        ),
        CheckSpec {
            name: "grad_reverse",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let a = rand_tensor(&mut rng, vec![3, 2], -2.0, 2.0);
                let lambda: f64 = rng.gen_range(0.2..2.0);
                let w = rand_weights(&mut rng, 6);
                CheckCase {
                    inputs: vec![a],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            let v = tape.grad_reverse(vars[0], lambda)?;
                            scalarize(tape, v, &w)
                        })
                    }),
                    scale: -lambda,
                }
            }),
        },
        CheckSpec {
            name: "log_softmax",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let a = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
                let w = rand_weights(&mut rng, 12);
                CheckCase {
                    inputs: vec![a],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            let v = tape.log_softmax(vars[0])?;
                            scalarize(tape, v, &w)
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "margin_max",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let margins: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let m = margins.clone();
                let a = rand_away_from(&mut rng, vec![3, 4], move |j| m[j], 0.05);
                let w = rand_weights(&mut rng, 12);
                CheckCase {
                    inputs: vec![a],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            let v = tape.margin_max(vars[0], &margins)?;
                            scalarize(tape, v, &w)
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "partial_l2",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let teacher = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
                let t = teacher.clone();
                let student = rand_away_from(&mut rng, vec![3, 4], move |_| 0.0, 0.0)
                    .data
                    .iter()
                    .zip(&t.data)
                    .map(|(&s, &tv)| if (s - tv).abs() < 0.05 { s + 0.1 } else { s })
                    .collect::<Vec<_>>();
                let student = Tensor::param(vec![3, 4], student).expect("finite");
                CheckCase {
                    inputs: vec![student],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| tape.partial_l2(&teacher, vars[0]))
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "mmd_gaussian",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let source = rand_tensor(&mut rng, vec![3, 2], -2.0, 2.0);
                let target = rand_tensor(&mut rng, vec![4, 2], -2.0, 2.0);
                CheckCase {
                    inputs: vec![source, target],
                    eval: Box::new(|ins| {
                        eval_with_tape(ins, |tape, vars| {
                            tape.mmd_gaussian(vars[0], vars[1], &[0.5, 1.0, 2.0])
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "cross_entropy",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let logits = rand_tensor(&mut rng, vec![4, 3], -2.0, 2.0);
                let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
                CheckCase {
                    inputs: vec![logits],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| cross_entropy(tape, vars[0], &labels))
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "logits_distill",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let student = rand_tensor(&mut rng, vec![4, 3], -2.0, 2.0);
                let teacher = rand_tensor(&mut rng, vec![4, 3], -2.0, 2.0);
                let tau: f64 = rng.gen_range(0.5..4.0);
                let convention = if seed % 2 == 0 {
                    SoftmaxConvention::StandardDivide
                } else {
                    SoftmaxConvention::PaperMultiply
                };
                CheckCase {
                    inputs: vec![student],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            logits_distill(tape, vars[0], &teacher, tau, convention)
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "domain_confusion_classifier",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let layout = [(2usize, 4usize), (4, 2)];
                let fs = rand_tensor(&mut rng, vec![3, 2], -2.0, 2.0);
                let ft = rand_tensor(&mut rng, vec![2, 2], -2.0, 2.0);
                let params = loop {
                    let p = rand_layer_params(&mut rng, &layout);
                    if min_preactivation(&p, &[&fs, &ft]) > 2e-3 {
                        break p;
                    }
                };
                let spec = two_layer_spec(2, 4, 2);
                CheckCase {
                    inputs: params,
                    eval: Box::new(move |ins| {
                        eval_network_loss(ins, &layout, |tape, state| {
                            let fsv = tape.constant(fs.shape.clone(), fs.data.clone())?;
                            let ftv = tape.constant(ft.shape.clone(), ft.data.clone())?;
                            domain_confusion(tape, fsv, ftv, (state, &spec), 1.0)
                        })
                    }),
                    scale: 1.0,
                }
            }),
        },
        CheckSpec {
            name: "domain_confusion_features",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let layout = [(2usize, 4usize), (4, 2)];
                let mut params = rand_layer_params(&mut rng, &layout);
                for p in &mut params {
                    p.requires_grad = false;
                }
                let spec = two_layer_spec(2, 4, 2);
                let (fs, ft) = loop {
                    let fs = rand_tensor(&mut rng, vec![3, 2], -2.0, 2.0);
                    let ft = rand_tensor(&mut rng, vec![2, 2], -2.0, 2.0);
                    if min_preactivation(&params, &[&fs, &ft]) > 2e-3 {
                        break (fs, ft);
                    }
                };
                let lambda: f64 = rng.gen_range(0.2..2.0);
                CheckCase {
                    inputs: vec![fs, ft],
                    eval: Box::new(move |ins| {
                        eval_with_tape(ins, |tape, vars| {
                            let state = state_from(&params, &layout);
                            domain_confusion(tape, vars[0], vars[1], (&state, &spec), lambda)
                        })
                    }),
                    scale: -lambda,
                }
            }),
        },
        CheckSpec {
            name: "feature_distill",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let teacher = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
                let mut margins = MarginState::new(4, MarginMode::CountWeighted);
                let sample = rand_tensor(&mut rng, vec![6, 4], -2.0, 2.0);
                margins.update(&sample).expect("margin update");
                let student_feats = rand_tensor(&mut rng, vec![3, 2], -2.0, 2.0);
                let rw = rand_tensor(&mut rng, vec![2, 4], -0.8, 0.8);
                let rb = rand_tensor(&mut rng, vec![4], -0.3, 0.3);
                CheckCase {
                    inputs: vec![student_feats, rw, rb],
                    eval: Box::new(move |ins| {
                        let regressor = RegressorState {
                            weight: ins[1].clone(),
                            bias: ins[2].clone(),
                        };
                        let mut tape = Tape::new();
                        let feats = tape.leaf(&ins[0]);
                        let out =
                            feature_distill(&mut tape, &teacher, feats, &margins, &regressor)?;
                        let value = tape.data(out)[0];
                        let grads = tape.backward(out)?;
                        let pull = |t: &Tensor, v: Option<Var>| {
                            v.and_then(|v| grads.wrt(v))
                                .map(<[f64]>::to_vec)
                                .unwrap_or_else(|| vec![0.0; t.data.len()])
                        };
                        Ok((
                            value,
                            vec![
                                pull(&ins[0], Some(feats)),
                                pull(&ins[1], tape.leaf_of(&regressor.weight)),
                                pull(&ins[2], tape.leaf_of(&regressor.bias)),
                            ],
                        ))
                    }),
                    scale: 1.0,
                }
            }),
        },
    ];
    checks.push(CheckSpec {
        name: "mlp_cross_entropy",
        gen: Box::new(|seed| {
            let mut rng = rng_for(seed);
            let layout = [(2usize, 5usize), (5, 3)];
            let batch = rand_tensor(&mut rng, vec![4, 2], -2.0, 2.0);
            let params = loop {
                let p = rand_layer_params(&mut rng, &layout);
                if min_preactivation(&p, &[&batch]) > 2e-3 {
                    break p;
                }
            };
            let spec = two_layer_spec(2, 5, 3);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            CheckCase {
                inputs: params,
                eval: Box::new(move |ins| {
                    eval_network_loss(ins, &layout, |tape, state| {
                        let bv = tape.constant(batch.shape.clone(), batch.data.clone())?;
                        let (logits, _) = crate::nets::forward(state, &spec, tape, bv)?;
                        cross_entropy(tape, logits, &labels)
                    })
                }),
                scale: 1.0,
            }
        }),
    });
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_standard_checks_pass_at_small_count() {
        for outcome in run_all(5, 7).unwrap() {
            assert!(
                outcome.max_rel_err < 1e-4,
                "{} rel err {}",
                outcome.name,
                outcome.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        // A sign error in the "analytic" gradient must blow past the bound.
        let check = CheckSpec {
            name: "negated_square",
            gen: Box::new(|seed| {
                let mut rng = rng_for(seed);
                let a = rand_tensor(&mut rng, vec![2, 2], 0.5, 2.0);
                CheckCase {
                    inputs: vec![a],
                    eval: Box::new(|ins| {
                        let value: f64 = ins[0].data.iter().map(|v| v * v).sum();
                        let bad_grad: Vec<f64> = ins[0].data.iter().map(|v| -2.0 * v).collect();
                        Ok((value, vec![bad_grad]))
                    }),
                    scale: 1.0,
                }
            }),
        };
        let out = run_checks(&[check], 3, 1).unwrap();
        assert!(out[0].max_rel_err > 1e-2);
    }

    #[test]
    fn relative_error_uses_absolute_floor() {
        assert!(rel_err(0.0, 5e-7) < 1e-4);
        assert!(rel_err(2.0, -2.0) > 1.0);
    }
}
