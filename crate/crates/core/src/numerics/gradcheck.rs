use super::{NumericsError, Tape, Tensor, Var};

/// Central-difference gradient checker.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`; the
/// floor keeps near-zero gradients from amplifying floating-point noise.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, floor: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub passed: bool,
}

impl GradCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        Self { h, tol, ..Self::default() }
    }

    fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64, NumericsError>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.detach())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    }

    /// Checks `f` on a single input at every coordinate.
    pub fn run<F>(&self, f: F, x: &Tensor) -> Result<GradCheckReport, NumericsError>
    where
        F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
    {
        let coords: Vec<(usize, usize)> = (0..x.numel()).map(|i| (0, i)).collect();
        self.run_many(|t, v| f(t, v[0]), std::slice::from_ref(x), &coords)
    }

    /// Checks `f` over several inputs at the selected `(input, index)` coordinates.
    pub fn run_many<F>(&self, f: F, inputs: &[Tensor], coords: &[(usize, usize)]) -> Result<GradCheckReport, NumericsError>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
    {
        let base = Self::eval(&f, inputs)?;
        let again = Self::eval(&f, inputs)?;
        if base.to_bits() != again.to_bits() {
            return Err(NumericsError::NonDeterministic { first: base, second: again });
        }

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.detach().with_requires_grad())).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();

        let mut work: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
        let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, passed: true };
        for &(input, index) in coords {
            let orig = work[input].data()[index];
            work[input].data_mut()[index] = orig + self.h;
            let plus = Self::eval(&f, &work)?;
            work[input].data_mut()[index] = orig - self.h;
            let minus = Self::eval(&f, &work)?;
            work[input].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * self.h);
            let a = analytic[input][index];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((input, index, a, numeric));
                }
            }
        }
        report.passed = report.max_rel_error <= self.tol;
        Ok(report)
    }
}
