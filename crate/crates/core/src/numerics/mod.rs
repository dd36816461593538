//! Dense matrices and a reverse-mode gradient tape.
//!
//! The tape covers exactly the primitives the attention decoder, the
//! energies and forward kinematics are built from. Programs are plain
//! closures over a [`Tape`]; [`forward`] runs one, [`backward`] pulls an
//! adjoint back to the inputs and [`finite_diff_check`] compares the two
//! against central differences.

mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{softmax_in_place, Gradients, Tape, Var};
pub use tensor::{dot, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tape was extended after the forward pass; record a new pass before calling backward")]
    TapeMutated,
    #[error("finite-difference check needs a scalar output, got {rows}x{cols}")]
    NonScalar { rows: usize, cols: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

type BuildFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Vec<Var>, NumericsError> + Sync + 'a;

/// A fixed computation graph with a declared input signature.
pub struct Program<'a> {
    signature: Vec<[usize; 2]>,
    build: Box<BuildFn<'a>>,
}

impl<'a> Program<'a> {
    pub fn new<F>(signature: Vec<[usize; 2]>, build: F) -> Self
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>, NumericsError> + Sync + 'a,
    {
        Self { signature, build: Box::new(build) }
    }

    pub fn signature(&self) -> &[[usize; 2]] {
        &self.signature
    }
}

/// Result of [`forward`]: the outputs plus the tape that produced them.
#[derive(Debug, Clone)]
pub struct Recording {
    tape: Tape,
    inputs: Vec<Var>,
    outputs: Vec<Var>,
    sealed_len: usize,
}

impl Recording {
    pub fn outputs(&self) -> Vec<Tensor> {
        self.outputs.iter().map(|&v| self.tape.value(v).clone()).collect()
    }

    pub fn output(&self, i: usize) -> &Tensor {
        self.tape.value(self.outputs[i])
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Mutable access to the tape. Pushing anything invalidates the
    /// recording for [`backward`].
    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

pub fn forward(program: &Program<'_>, inputs: &[Tensor]) -> Result<Recording, NumericsError> {
    forward_on(Tape::new(), program, inputs)
}

fn forward_on(mut tape: Tape, program: &Program<'_>, inputs: &[Tensor]) -> Result<Recording, NumericsError> {
    if inputs.len() != program.signature.len() {
        return Err(NumericsError::Shape {
            op: "input",
            detail: format!("{} inputs for a {}-input program", inputs.len(), program.signature.len()),
        });
    }
    for (i, (t, want)) in inputs.iter().zip(&program.signature).enumerate() {
        if t.shape() != *want {
            return Err(NumericsError::Shape { op: "input", detail: format!("input {i} is {:?}, expected {want:?}", t.shape()) });
        }
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let outputs = (program.build)(&mut tape, &vars)?;
    let sealed_len = tape.len();
    Ok(Recording { tape, inputs: vars, outputs, sealed_len })
}

/// Gradient of `Σ_o ⟨adjoint_o, output_o⟩` with respect to every input.
pub fn backward(rec: &Recording, adjoints: &[Tensor]) -> Result<Vec<Tensor>, NumericsError> {
    if rec.tape.len() != rec.sealed_len {
        return Err(NumericsError::TapeMutated);
    }
    if adjoints.len() != rec.outputs.len() {
        return Err(NumericsError::Shape {
            op: "backward",
            detail: format!("{} adjoints for {} outputs", adjoints.len(), rec.outputs.len()),
        });
    }
    let seeds: Vec<(Var, &Tensor)> = rec.outputs.iter().copied().zip(adjoints).collect();
    let grads = rec.tape.gradients_multi(&seeds)?;
    Ok(rec.inputs.iter().map(|&v| grads.get(v)).collect())
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Largest `|g_ad − g_fd| / max(|g_ad|, |g_fd|, floor)` over compared coordinates.
    pub max_rel_error: f64,
    pub compared: usize,
    /// `(input, flat index)` pairs whose stencil straddles a kink of a
    /// non-smooth primitive.
    pub non_comparable: Vec<(usize, usize)>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Denominator floor for relative errors: coordinates whose gradient is
/// below this magnitude are compared absolutely.
pub const FD_REL_FLOOR: f64 = 1e-6;

/// Compares [`backward`] against central differences coordinate by
/// coordinate. The program must produce a single `1×1` output.
///
/// A coordinate is non-comparable when the `+step` and `−step` evaluations
/// take different branches through a non-smooth primitive (`max`, `abs`,
/// row maximum); such coordinates are listed instead of failing.
pub fn finite_diff_check(
    program: &Program<'_>,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<FdReport, NumericsError> {
    if !(step > 0.0) {
        return Err(NumericsError::BadStep(step));
    }
    let base = forward(program, inputs)?;
    if base.outputs.len() != 1 || base.output(0).shape() != [1, 1] {
        let [rows, cols] = base.outputs.first().map_or([0, 0], |&v| base.tape.shape(v));
        return Err(NumericsError::NonScalar { rows, cols });
    }
    let grads = backward(&base, &[Tensor::scalar(1.0)])?;

    let eval = |perturbed: &[Tensor]| -> Result<(f64, Vec<i64>), NumericsError> {
        let rec = forward_on(Tape::with_branch_log(), program, perturbed)?;
        let branches = rec.tape.branch_log().unwrap_or(&[]).to_vec();
        Ok((rec.output(0).item(), branches))
    };

    let mut report = FdReport { max_rel_error: 0.0, compared: 0, non_comparable: Vec::new(), tolerance };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let (fp, bp) = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let (fm, bm) = eval(&work)?;
            work[i].data_mut()[j] = x0;
            if bp != bm {
                report.non_comparable.push((i, j));
                continue;
            }
            let fd = (fp - fm) / (2.0 * step);
            let ad = g.data()[j];
            let denom = ad.abs().max(fd.abs()).max(FD_REL_FLOOR);
            report.max_rel_error = report.max_rel_error.max((ad - fd).abs() / denom);
            report.compared += 1;
        }
    }
    Ok(report)
}
