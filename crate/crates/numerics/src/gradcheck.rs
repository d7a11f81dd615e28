//! Central finite-difference gradient checking against the tape.

use rand::Rng;

use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{NumericsError, Result};

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Gradient agreement for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `‖analytic‖`.
    pub analytic: f64,
    /// `‖numeric‖`.
    pub numeric: f64,
    /// `‖analytic − numeric‖`.
    pub diff: f64,
}

impl ParamCheck {
    pub fn relative_error(&self) -> f64 {
        self.relative_error_floored(0.0)
    }

    /// `diff / max(‖a‖, ‖n‖, floor)`; the floor keeps parameters whose true
    /// gradient vanishes from being judged on rounding noise alone.
    pub fn relative_error_floored(&self, floor: f64) -> f64 {
        let scale = self.analytic.max(self.numeric).max(floor);
        if scale < 1e-12 {
            self.diff
        } else {
            self.diff / scale
        }
    }
}

/// Compares tape gradients of `loss` with central differences of step `h`
/// for every parameter in `store`. Returns `(name, relative_error)` pairs.
pub fn check<F>(store: &ParamStore, h: f64, loss: F) -> Result<Vec<(String, f64)>>
where
    F: for<'t> Fn(&'t Tape, &Bindings<'t>) -> Result<Var<'t>>,
{
    Ok(check_params(store, h, loss)?
        .into_iter()
        .map(|c| {
            let e = c.relative_error();
            (c.name, e)
        })
        .collect())
}

/// Like [`check`], keeping the norms for each parameter.
pub fn check_params<F>(store: &ParamStore, h: f64, loss: F) -> Result<Vec<ParamCheck>>
where
    F: for<'t> Fn(&'t Tape, &Bindings<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let l = loss(&tape, &bound)?;
    let grads = tape.backward(l)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind_frozen(&tape);
        Ok(loss(&tape, &bound)?.scalar())
    };

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut report = Vec::new();
    for (name, t) in store.iter() {
        let analytic = grads
            .raw(bound.get(name)?)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        let mut probe = store.clone();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = t.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        report.push(ParamCheck {
            name: name.clone(),
            analytic: norm(&analytic),
            numeric: norm(&numeric),
            diff: norm(&diff),
        });
    }
    Ok(report)
}

/// Differentiable primitives covered by [`check_primitives`].
pub const PRIMITIVES: [&str; 16] = [
    "conv", "depthwise", "maxpool", "avgpool", "gap", "affine", "relu", "sigmoid", "matmul",
    "add_mul", "add_row", "concat", "index_select", "softmax_ce", "mse", "rms_norm",
];

/// Reduces `v` to a scalar through fixed random weights so every output
/// element carries a distinct upstream gradient.
fn mix<'t>(tape: &'t Tape, v: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let len = v.value().numel();
    let w = Tensor::new(vec![len], weights.data()[..len].to_vec())?;
    v.reshape(&[len])?.mul(tape.constant(w))?.sum()
}

fn primitive_loss<'t>(
    name: &str,
    t: &'t Tape,
    p: &Bindings<'t>,
    c: usize,
    weights: &Tensor,
    target: &Tensor,
) -> Result<Var<'t>> {
    let mix = |v| mix(t, v, weights);
    match name {
        "conv" => mix(p.get("x")?.conv2d(p.get("w")?, None, (1, 1), (1, 1), 1)?),
        "depthwise" => mix(p.get("x")?.conv2d(p.get("dw")?, None, (2, 2), (1, 1), c)?),
        "maxpool" => mix(p.get("x")?.maxpool2d((2, 2), (1, 1), (0, 0))?),
        "avgpool" => mix(p.get("x")?.avgpool2d((3, 3), (2, 2), (1, 1))?),
        "gap" => mix(p.get("x")?.global_avgpool()?),
        "affine" => mix(p.get("x")?.channel_affine(p.get("gamma")?, p.get("beta")?)?),
        "relu" => mix(p.get("m")?.relu()?),
        "sigmoid" => mix(p.get("m")?.sigmoid()?),
        "matmul" => mix(p.get("m")?.matmul(p.get("k")?)?),
        "add_mul" => {
            let a = p.get("m")?.matmul(p.get("k")?)?;
            mix(a.add(a.mul(a)?)?.sub(a.scale(0.3)?)?)
        }
        "add_row" => mix(p.get("m")?.matmul(p.get("k")?)?.add_row(p.get("r")?)?),
        "concat" => {
            let a = p.get("m")?;
            mix(Var::concat(&[a, a.sigmoid()?], 1)?)
        }
        "index_select" => mix(p.get("x")?.index_select(1, &[c - 1, 0, c - 1])?),
        "softmax_ce" => p.get("m")?.softmax_cross_entropy(&[1, 3, 0]),
        "mse" => p.get("m")?.matmul(p.get("k")?)?.mse(t.constant(target.clone())),
        "rms_norm" => mix(p.get("m")?.rms_norm_rows(1e-6)?),
        other => Err(NumericsError::Shape(format!("unknown primitive `{other}`"))),
    }
}

/// One randomized instance of every primitive in [`PRIMITIVES`], drawn from
/// `seed`. Returns the worst relative error per primitive.
pub fn check_primitives(seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = crate::rng::seeded(1000 + seed);
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let hw = rng.gen_range(3..=5);
    let mut store = ParamStore::new();
    store.insert("x", Tensor::uniform(&[n, c, hw, hw], 1.0, &mut rng));
    store.insert("w", Tensor::uniform(&[2, c, 2, 2], 0.7, &mut rng));
    store.insert("dw", Tensor::uniform(&[c, 1, 3, 3], 0.7, &mut rng));
    store.insert("gamma", Tensor::uniform(&[c], 1.0, &mut rng));
    store.insert("beta", Tensor::uniform(&[c], 1.0, &mut rng));
    store.insert("m", Tensor::uniform(&[3, 4], 1.0, &mut rng));
    store.insert("k", Tensor::uniform(&[4, 2], 1.0, &mut rng));
    store.insert("r", Tensor::uniform(&[2], 1.0, &mut rng));
    let weights = Tensor::uniform(&[256], 1.0, &mut rng);
    let target = Tensor::uniform(&[3, 2], 1.0, &mut rng);
    PRIMITIVES
        .iter()
        .map(|&name| {
            let report = check(&store, h, |t, p| primitive_loss(name, t, p, c, &weights, &target))?;
            Ok((name, report.iter().map(|(_, e)| *e).fold(0.0, f64::max)))
        })
        .collect()
}
