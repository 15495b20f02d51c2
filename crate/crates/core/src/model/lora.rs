use crate::numerics::{Result, Scalar, Tape, Var};

use super::weights::LoraLinear;

/// Applies `y_t = W·x_t + gate_t · scale · Bᵀ(Aᵀx_t)` to every row of `x`.
///
/// Rows with a zero gate are exact copies of the frozen projection, whatever the
/// adapter holds. A layer without an adapter ignores the gate.
pub fn gated_lora_apply<F: Scalar>(
    tape: &mut Tape<F>,
    layer: &LoraLinear<Var>,
    x: Var,
    gate: &[bool],
    scale: F,
) -> Result<Var> {
    let base = tape.matmul_t(x, layer.weight)?;
    match &layer.adapter {
        Some(ad) if gate.iter().any(|&g| g) => {
            let down = tape.matmul(x, ad.a)?;
            let delta = tape.matmul(down, ad.b)?;
            tape.gated_add(base, delta, gate, scale)
        }
        _ => {
            let rows = tape.value(base).rows();
            if gate.len() != rows {
                return Err(crate::numerics::NumericsError::ShapeMismatch {
                    op: "gated_lora_apply gate",
                    lhs: vec![rows],
                    rhs: vec![gate.len()],
                });
            }
            Ok(base)
        }
    }
}
