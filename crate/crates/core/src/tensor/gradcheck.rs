use super::{Tape, Tensor};

/// Gradient magnitude below which differences are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;
use crate::error::{ensure, Result};

/// One named input of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    /// Frozen parameters enter the graph as constants and are left out of the report.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            data,
            shape: shape.to_vec(),
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(name, relative error)` for every trainable parameter.
    pub entries: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares autodiff gradients against central finite differences in `f64`.
///
/// The relative error of a parameter is
/// `‖g_auto − g_fd‖∞ / max(‖g_auto‖∞, ‖g_fd‖∞, GRAD_FLOOR)`, which stays
/// meaningful when individual components are near zero. The floor keeps
/// gradients that vanish identically (attention key biases, for instance)
/// from turning finite-difference round-off into a relative error of one.
pub fn check_gradients<F>(
    build: F,
    params: &[ParamSpec],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Tensor<'t, f64>]) -> Result<Tensor<'t, f64>>,
{
    ensure!(
        step > 0.0,
        Config,
        "finite-difference step must be positive"
    );
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<_> = params
            .iter()
            .zip(values)
            .map(|(p, v)| tape.constant(v.clone(), &p.shape))
            .collect();
        Ok(build(&tape, &leaves)?.item())
    };

    let tape = Tape::new();
    let leaves: Vec<_> = params
        .iter()
        .map(|p| tape.leaf(p.data.clone(), &p.shape, p.trainable))
        .collect();
    let loss = build(&tape, &leaves)?;
    tape.backward(loss)?;

    let mut values: Vec<Vec<f64>> = params.iter().map(|p| p.data.clone()).collect();
    let mut entries = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let auto = leaves[pi].grad().unwrap_or_else(|| vec![0.0; p.data.len()]);
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..p.data.len() {
            let orig = values[pi][i];
            values[pi][i] = orig + step;
            let up = eval(&values)?;
            values[pi][i] = orig - step;
            let down = eval(&values)?;
            values[pi][i] = orig;
            let fd = (up - down) / (2.0 * step);
            max_diff = max_diff.max((auto[i] - fd).abs());
            scale = scale.max(auto[i].abs()).max(fd.abs());
        }
        let rel = max_diff / scale.max(GRAD_FLOOR);
        entries.push((p.name.clone(), rel));
    }
    let max_rel_err = entries.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        tolerance,
    })
}
