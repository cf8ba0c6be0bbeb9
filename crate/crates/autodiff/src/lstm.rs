use crate::{TensorError, Var};

/// Weights of one LSTM layer. Gate blocks are laid out `[i | f | g | o]`
/// along the last axis of every tensor.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights<'g> {
    /// `[input, 4 * units]`
    pub w_ih: Var<'g>,
    /// `[units, 4 * units]`
    pub w_hh: Var<'g>,
    /// `[4 * units]`
    pub bias: Var<'g>,
}

/// One step of a standard LSTM over a batch: `x` is `[N, input]`, `h` and
/// `c` are `[N, units]`. Returns `(h', c')`.
pub fn lstm_cell<'g>(
    x: Var<'g>,
    h: Var<'g>,
    c: Var<'g>,
    weights: &LstmWeights<'g>,
) -> Result<(Var<'g>, Var<'g>), TensorError> {
    let units = h.shape().get(1).copied().unwrap_or(0);
    let gate_shape = weights.w_hh.shape();
    if gate_shape.len() != 2 || gate_shape[1] != 4 * units || c.shape() != h.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            lhs: h.shape(),
            rhs: gate_shape,
        });
    }
    let gates = x
        .matmul(weights.w_ih)?
        .add(h.matmul(weights.w_hh)?)?
        .bias_add(weights.bias)?;
    let input = gates.slice(1, 0, units)?.sigmoid();
    let forget = gates.slice(1, units, 2 * units)?.sigmoid();
    let cand = gates.slice(1, 2 * units, 3 * units)?.tanh();
    let output = gates.slice(1, 3 * units, 4 * units)?.sigmoid();
    let c_next = forget.mul(c)?.add(input.mul(cand)?)?;
    let h_next = output.mul(c_next.tanh())?;
    Ok((h_next, c_next))
}
