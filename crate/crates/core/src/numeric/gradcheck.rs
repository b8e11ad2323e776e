use rand::Rng;
use rand_distr::StandardNormal;

use super::{rng_from_seed, BatchNormStats, GruWeights, Tape, Tensor, Var};
use crate::error::{Result, SeldError};

/// Maximum relative error between tape gradients and central finite
/// differences of a scalar function, per input tensor.
///
/// `f` is rebuilt on a fresh double-precision tape for every evaluation, so
/// it must be deterministic.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(SeldError::Usage(format!(
                "grad_check needs a scalar function, got {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; x.numel()])
        })
        .collect();

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, grads) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        errors.push(worst);
    }
    Ok(errors)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let errs = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(errs[0])
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Scalarizes a tensor-valued op with fixed random weights.
fn weighted(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(v), seed ^ 0x5eed));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn gru_params(d: usize, h: usize, seed: u64) -> [Tensor<f64>; 4] {
    [randn(&[d, 3 * h], seed), randn(&[h, 3 * h], seed + 1), randn(&[3 * h], seed + 2), randn(&[3 * h], seed + 3)]
}

type Unary = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;
type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
type Ternary = fn(&mut Tape<f64>, Var, Var, Var) -> Result<Var>;

/// Checks every differentiable tape op on small random inputs. Returns the
/// max relative error over all inputs of each op.
pub fn op_suite(h: f64) -> Result<Vec<(String, f64)>> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, errs: Vec<f64>| out.push((name.to_string(), errs.into_iter().fold(0.0, f64::max)));

    let unary: Vec<(&str, Unary)> = vec![
        ("relu", Box::new(|t, v| Ok(t.relu(v)))),
        ("tanh", Box::new(|t, v| Ok(t.tanh(v)))),
        ("sigmoid", Box::new(|t, v| Ok(t.sigmoid(v)))),
        ("scale", Box::new(|t, v| Ok(t.scale(v, -1.7)))),
        ("add_scalar", Box::new(|t, v| Ok(t.add_scalar(v, 0.3)))),
        ("reshape", Box::new(|t, v| t.reshape(v, &[4, 6]))),
        ("permute", Box::new(|t, v| t.permute(v, &[2, 0, 1]))),
        ("softmax_axis0", Box::new(|t, v| t.softmax(v, 0))),
        ("softmax_axis2", Box::new(|t, v| t.softmax(v, 2))),
        ("slice", Box::new(|t, v| t.slice(v, 2, 1, 2))),
        ("sum", Box::new(|t, v| Ok(t.sum(v)))),
        ("mean", Box::new(|t, v| Ok(t.mean(v)))),
        ("dropout", Box::new(|t, v| t.dropout(v, 0.4, true, &mut rng_from_seed(99)))),
    ];
    let x = randn(&[2, 3, 4], 19);
    for (name, op) in &unary {
        let err = grad_check(
            |t, v| {
                let y = op(t, v)?;
                weighted(t, y, 20)
            },
            &x,
            h,
        )?;
        push(name, vec![err]);
    }

    let errs = grad_check_many(
        |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.sub(y, v[2])?;
            weighted(t, y, 21)
        },
        &[randn(&[3, 4], 22), randn(&[4], 23), randn(&[3, 4], 24)],
        h,
    )?;
    push("add_sub_broadcast", errs);

    let binary: Vec<(&str, [Vec<usize>; 2], Binary)> = vec![
        ("mul", [vec![3, 4], vec![3, 4]], |t, a, b| t.mul(a, b)),
        ("matmul_batched", [vec![2, 1, 3, 4], vec![3, 4, 2]], |t, a, b| t.matmul(a, b)),
        ("concat", [vec![2, 3, 2], vec![2, 1, 2]], |t, a, b| t.concat(&[a, b], 1)),
    ];
    for (k, (name, shapes, op)) in binary.iter().enumerate() {
        let seed = 25 + 3 * k as u64;
        let errs = grad_check_many(
            |t, v| {
                let y = op(t, v[0], v[1])?;
                weighted(t, y, seed)
            },
            &[randn(&shapes[0], seed + 1), randn(&shapes[1], seed + 2)],
            h,
        )?;
        push(name, errs);
    }

    let ternary: Vec<(&str, [Vec<usize>; 3], Ternary)> = vec![
        ("linear", [vec![2, 3, 4], vec![4, 5], vec![5]], |t, x, w, b| t.linear(x, w, b)),
        ("layer_norm", [vec![3, 6], vec![6], vec![6]], |t, x, g, b| t.layer_norm(x, g, b, 1e-5)),
        ("conv2d", [vec![2, 2, 4, 5], vec![3, 2, 3, 3], vec![3]], |t, x, w, b| t.conv2d(x, w, b)),
    ];
    for (k, (name, shapes, op)) in ternary.iter().enumerate() {
        let seed = 31 + 4 * k as u64;
        let errs = grad_check_many(
            |t, v| {
                let y = op(t, v[0], v[1], v[2])?;
                weighted(t, y, seed)
            },
            &[randn(&shapes[0], seed + 1), randn(&shapes[1], seed + 2), randn(&shapes[2], seed + 3)],
            h,
        )?;
        push(name, errs);
    }

    let err = grad_check(
        |t, v| {
            let y = t.max_pool2d(v, 2, 3)?;
            weighted(t, y, 43)
        },
        &randn(&[2, 2, 4, 6], 44),
        h,
    )?;
    push("max_pool2d", vec![err]);

    for (name, training) in [("batch_norm2d_train", true), ("batch_norm2d_eval", false)] {
        let errs = grad_check_many(
            |t, v| {
                let mut stats = BatchNormStats::new(3);
                stats.mean = vec![0.1, -0.2, 0.3];
                stats.var = vec![1.5, 0.7, 2.0];
                let y = t.batch_norm2d(v[0], v[1], v[2], &mut stats, training)?;
                weighted(t, y, 45)
            },
            &[randn(&[2, 3, 2, 3], 46), randn(&[3], 47), randn(&[3], 48)],
            h,
        )?;
        push(name, errs);
    }

    let errs = grad_check_many(|t, v| t.mse_loss(v[0], v[1]), &[randn(&[3, 5], 49), randn(&[3, 5], 50)], h)?;
    push("mse_loss", errs);

    let (d, hidden) = (3, 2);
    let mut inputs = vec![randn(&[2, 4, d], 54)];
    inputs.extend(gru_params(d, hidden, 55));
    inputs.extend(gru_params(d, hidden, 65).into_iter().map(|p| p.map(|v| 0.5 * v)));
    let errs = grad_check_many(
        |t, v| {
            let f = GruWeights { w_ih: v[1], w_hh: v[2], b_ih: v[3], b_hh: v[4] };
            let b = GruWeights { w_ih: v[5], w_hh: v[6], b_ih: v[7], b_hh: v[8] };
            let y = t.gru_bidirectional(v[0], &f, &b)?;
            weighted(t, y, 56)
        },
        &inputs,
        h,
    )?;
    push("gru_bidirectional", errs);
    Ok(out)
}
