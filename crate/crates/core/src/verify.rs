//! Gradient-integrity battery shared by the unit tests and the acceptance
//! suite: every differentiable primitive is checked against central finite
//! differences in f64 at small shapes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::BnState;
use crate::tape::{check_gradients, GradCheckReport, Tape, Var};
use crate::tensor::Tensor;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero, for ops with a kink at the origin.
fn rand_t_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.0);
            if rng.random_range(0.0..1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Project `v` to a scalar through fixed random weights so that upstream
/// gradients differ per element.
fn weighted_loss(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let n = tape.data(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weighted = tape.mul_const(v, Arc::new(w))?;
    Ok(tape.sum_all(weighted))
}

type OpCase = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {
            cases.push(($name, $inputs, Box::new($f)));
        };
    }

    let a33 = rand_t(&mut rng, &[3, 3], -1.0, 1.0);
    let b33 = rand_t(&mut rng, &[3, 3], -1.0, 1.0);
    case!("add", vec![a33.clone(), b33.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_loss(t, y, 1)
    });
    case!("sub", vec![a33.clone(), b33.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_loss(t, y, 2)
    });
    case!("mul", vec![a33.clone(), b33.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_loss(t, y, 3)
    });
    case!("neg", vec![a33.clone()], |t, v| {
        let y = t.neg(v[0]);
        weighted_loss(t, y, 4)
    });
    case!("scale", vec![a33.clone()], |t, v| {
        let y = t.scale(v[0], -1.7);
        weighted_loss(t, y, 5)
    });
    case!("abs", vec![rand_t_away_from_zero(&mut rng, &[4, 4])], |t, v| {
        let y = t.abs(v[0]);
        weighted_loss(t, y, 6)
    });
    case!(
        "leaky_relu",
        vec![rand_t_away_from_zero(&mut rng, &[4, 4])],
        |t, v| {
            let y = t.leaky_relu(v[0], 0.2);
            weighted_loss(t, y, 7)
        }
    );
    case!("gelu", vec![rand_t(&mut rng, &[4, 4], -2.0, 2.0)], |t, v| {
        let y = t.gelu(v[0]);
        weighted_loss(t, y, 8)
    });
    case!(
        "log_clamped",
        vec![rand_t(&mut rng, &[4, 4], 0.05, 1.0)],
        |t, v| {
            let y = t.log_clamped(v[0], 1e-12);
            weighted_loss(t, y, 9)
        }
    );
    case!("add_const", vec![a33.clone()], |t, v| {
        let c: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let y = t.add_const(v[0], Arc::new(c))?;
        weighted_loss(t, y, 10)
    });
    case!("mul_const", vec![a33.clone()], |t, v| {
        let c: Vec<f64> = (0..9).map(|i| 1.0 + i as f64 * 0.1).collect();
        let y = t.mul_const(v[0], Arc::new(c))?;
        weighted_loss(t, y, 11)
    });
    case!(
        "scale_by",
        vec![a33.clone(), rand_t(&mut rng, &[1], 0.5, 1.5)],
        |t, v| {
            let y = t.scale_by(v[0], v[1])?;
            weighted_loss(t, y, 12)
        }
    );
    case!(
        "add_row_bias",
        vec![rand_t(&mut rng, &[4, 3], -1.0, 1.0), rand_t(&mut rng, &[3], -1.0, 1.0)],
        |t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            weighted_loss(t, y, 13)
        }
    );
    case!(
        "add_tiled",
        vec![rand_t(&mut rng, &[6, 2, 2], -1.0, 1.0), rand_t(&mut rng, &[3, 2, 2], -1.0, 1.0)],
        |t, v| {
            let y = t.add_tiled(v[0], v[1])?;
            weighted_loss(t, y, 14)
        }
    );
    case!(
        "matmul",
        vec![rand_t(&mut rng, &[3, 4], -1.0, 1.0), rand_t(&mut rng, &[4, 2], -1.0, 1.0)],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_loss(t, y, 15)
        }
    );
    case!(
        "matmul_nt",
        vec![rand_t(&mut rng, &[3, 4], -1.0, 1.0), rand_t(&mut rng, &[2, 4], -1.0, 1.0)],
        |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            weighted_loss(t, y, 16)
        }
    );
    case!(
        "bmm",
        vec![rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0), rand_t(&mut rng, &[2, 4, 2], -1.0, 1.0)],
        |t, v| {
            let y = t.bmm(v[0], v[1])?;
            weighted_loss(t, y, 17)
        }
    );
    case!(
        "bmm_nt",
        vec![rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0), rand_t(&mut rng, &[2, 2, 4], -1.0, 1.0)],
        |t, v| {
            let y = t.bmm_nt(v[0], v[1])?;
            weighted_loss(t, y, 18)
        }
    );
    case!(
        "conv2d_k3_s1_p1",
        vec![
            rand_t(&mut rng, &[2, 5, 5], -1.0, 1.0),
            rand_t(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            rand_t(&mut rng, &[3], -1.0, 1.0),
        ],
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_loss(t, y, 19)
        }
    );
    case!(
        "conv2d_k4_s2_p1",
        vec![
            rand_t(&mut rng, &[2, 6, 6], -1.0, 1.0),
            rand_t(&mut rng, &[2, 2, 4, 4], -1.0, 1.0),
        ],
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, 1)?;
            weighted_loss(t, y, 20)
        }
    );
    case!(
        "conv2d_k1",
        vec![
            rand_t(&mut rng, &[3, 4, 4], -1.0, 1.0),
            rand_t(&mut rng, &[2, 3, 1, 1], -1.0, 1.0),
        ],
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0)?;
            weighted_loss(t, y, 21)
        }
    );
    case!(
        "batch_norm_train",
        vec![
            rand_t(&mut rng, &[2, 3, 3], -1.0, 1.0),
            rand_t(&mut rng, &[2], 0.5, 1.5),
            rand_t(&mut rng, &[2], -0.5, 0.5),
        ],
        |t, v| {
            let mut state = BnState::new("gc", 2);
            let y = t.batch_norm(v[0], v[1], v[2], &mut state, true, 0.1, 1e-5)?;
            weighted_loss(t, y, 22)
        }
    );
    case!(
        "batch_norm_eval",
        vec![
            rand_t(&mut rng, &[2, 3, 3], -1.0, 1.0),
            rand_t(&mut rng, &[2], 0.5, 1.5),
            rand_t(&mut rng, &[2], -0.5, 0.5),
        ],
        |t, v| {
            let mut state = BnState::new("gc", 2);
            state.mean = vec![0.1, -0.2];
            state.var = vec![0.8, 1.3];
            state.batches_seen = 1;
            let y = t.batch_norm(v[0], v[1], v[2], &mut state, false, 0.1, 1e-5)?;
            weighted_loss(t, y, 23)
        }
    );
    case!(
        "layer_norm_last_axis",
        vec![
            rand_t(&mut rng, &[3, 4], -1.0, 1.0),
            rand_t(&mut rng, &[4], 0.5, 1.5),
            rand_t(&mut rng, &[4], -0.5, 0.5),
        ],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1, 1e-5)?;
            weighted_loss(t, y, 24)
        }
    );
    case!(
        "layer_norm_axis0",
        vec![
            rand_t(&mut rng, &[4, 2, 2], -1.0, 1.0),
            rand_t(&mut rng, &[4], 0.5, 1.5),
            rand_t(&mut rng, &[4], -0.5, 0.5),
        ],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 0, 1e-5)?;
            weighted_loss(t, y, 25)
        }
    );
    case!(
        "softmax_last_axis",
        vec![rand_t(&mut rng, &[3, 5], -2.0, 2.0)],
        |t, v| {
            let y = t.softmax(v[0], 1)?;
            weighted_loss(t, y, 26)
        }
    );
    case!(
        "softmax_axis0",
        vec![rand_t(&mut rng, &[4, 2, 2], -2.0, 2.0)],
        |t, v| {
            let y = t.softmax(v[0], 0)?;
            weighted_loss(t, y, 27)
        }
    );
    case!(
        "avg_pool2d_k2_s2",
        vec![rand_t(&mut rng, &[2, 4, 4], -1.0, 1.0)],
        |t, v| {
            let y = t.avg_pool2d(v[0], 2, 2)?;
            weighted_loss(t, y, 28)
        }
    );
    case!(
        "avg_pool2d_k2_s1",
        vec![rand_t(&mut rng, &[2, 4, 4], -1.0, 1.0)],
        |t, v| {
            let y = t.avg_pool2d(v[0], 2, 1)?;
            weighted_loss(t, y, 29)
        }
    );
    case!(
        "global_avg_pool",
        vec![rand_t(&mut rng, &[3, 4, 4], -1.0, 1.0)],
        |t, v| {
            let y = t.global_avg_pool(v[0])?;
            weighted_loss(t, y, 30)
        }
    );
    case!(
        "upsample_bilinear",
        vec![rand_t(&mut rng, &[2, 3, 3], -1.0, 1.0)],
        |t, v| {
            let y = t.upsample_bilinear(v[0], 2)?;
            weighted_loss(t, y, 31)
        }
    );
    case!(
        "upsample_nearest",
        vec![rand_t(&mut rng, &[2, 3, 3], -1.0, 1.0)],
        |t, v| {
            let y = t.upsample_nearest(v[0], 2)?;
            weighted_loss(t, y, 32)
        }
    );
    case!("reshape", vec![rand_t(&mut rng, &[2, 6], -1.0, 1.0)], |t, v| {
        let y = t.reshape(v[0], vec![3, 4])?;
        weighted_loss(t, y, 33)
    });
    case!(
        "permute",
        vec![rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0)],
        |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            weighted_loss(t, y, 34)
        }
    );
    case!("roll2d", vec![rand_t(&mut rng, &[2, 4, 4], -1.0, 1.0)], |t, v| {
        let y = t.roll2d(v[0], 1, 2)?;
        weighted_loss(t, y, 35)
    });
    case!(
        "take_axis0",
        vec![rand_t(&mut rng, &[3, 4], -1.0, 1.0)],
        |t, v| {
            let y = t.take_axis0(v[0], 1)?;
            weighted_loss(t, y, 36)
        }
    );
    case!(
        "gather_rows",
        vec![rand_t(&mut rng, &[4, 3], -1.0, 1.0)],
        |t, v| {
            let y = t.gather_rows(v[0], Arc::new(vec![0, 2, 2, 3]))?;
            weighted_loss(t, y, 37)
        }
    );
    case!("sum_all", vec![a33.clone()], |t, v| Ok(t.sum_all(v[0])));
    case!("mean_all", vec![a33.clone()], |t, v| Ok(t.mean_all(v[0])));
    case!(
        "window_partition_merge",
        vec![rand_t(&mut rng, &[2, 4, 4], -1.0, 1.0)],
        |t, v| {
            let w = t.window_partition(v[0], 2, 1)?;
            let back = t.window_merge(w, 4, 4, 2, 1)?;
            weighted_loss(t, back, 38)
        }
    );
    case!(
        "patch_flatten",
        vec![rand_t(&mut rng, &[2, 4, 4], -1.0, 1.0)],
        |t, v| {
            let y = t.patch_flatten(v[0], 2)?;
            weighted_loss(t, y, 39)
        }
    );
    cases
}

/// Run the finite-difference check for every primitive op; returns one
/// report per op.
pub fn op_gradient_reports() -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases() {
        let report = check_gradients(&inputs, 1e-5, 1e-8, f)?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}
