//! ConvLSTM cell and sequence runner over the ordered stack of axial slices.
//!
//! Gates are sigmoid of convolutions of the input and previous hidden state
//! plus per-position peephole Hadamard terms; the cell candidate and the
//! hidden output use ReLU rather than tanh, so the cell and hidden states
//! stay nonnegative when started at zero.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::params::{Binding, ParamSet};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Static geometry of one ConvLSTM cell. All gate kernels share one spatial
/// kernel size and one hidden channel count; peephole tensors match the
/// hidden state's (channel, height, width) shape.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvLstmSpec {
    fn x_conv(&self) -> ConvSpec {
        ConvSpec::same(self.kernel, self.in_channels, self.hidden_channels, 1)
    }

    fn h_conv(&self) -> ConvSpec {
        ConvSpec::same(self.kernel, self.hidden_channels, self.hidden_channels, 1)
    }

    fn state_shape(&self) -> Vec<usize> {
        vec![1, self.hidden_channels, self.height, self.width]
    }
}

const GATE_NAMES: [&str; 4] = ["f", "i", "c", "o"];

/// Register all cell parameters under `prefix` (w_x*, w_h*, peepholes w_c*,
/// biases b_*). The forget-gate bias starts at 1.0, everything else at zero.
pub fn init_params(params: &mut ParamSet, prefix: &str, spec: &ConvLstmSpec, rng: &mut ChaCha8Rng) {
    let k = spec.kernel;
    let (cin, ch) = (spec.in_channels, spec.hidden_channels);
    for g in GATE_NAMES {
        params.insert(
            format!("{prefix}.w_x{g}"),
            xavier_uniform(rng, &[ch, cin, k, k]),
        );
        params.insert(
            format!("{prefix}.w_h{g}"),
            xavier_uniform(rng, &[ch, ch, k, k]),
        );
        let bias = if g == "f" { 1.0 } else { 0.0 };
        params.insert(format!("{prefix}.b_{g}"), Tensor::full(&[ch], bias));
    }
    for g in ["f", "i", "o"] {
        params.insert(
            format!("{prefix}.w_c{g}"),
            Tensor::zeros(&spec.state_shape()),
        );
    }
}

/// Tape handles for one cell's parameters.
pub struct ConvLstmVars {
    w_x: [Var; 4],
    w_h: [Var; 4],
    b: [Var; 4],
    w_cf: Var,
    w_ci: Var,
    w_co: Var,
}

impl ConvLstmVars {
    pub fn bind(binding: &Binding, prefix: &str) -> ConvLstmVars {
        let get = |n: String| binding.var(&n);
        ConvLstmVars {
            w_x: GATE_NAMES.map(|g| get(format!("{prefix}.w_x{g}"))),
            w_h: GATE_NAMES.map(|g| get(format!("{prefix}.w_h{g}"))),
            b: GATE_NAMES.map(|g| get(format!("{prefix}.b_{g}"))),
            w_cf: get(format!("{prefix}.w_cf")),
            w_ci: get(format!("{prefix}.w_ci")),
            w_co: get(format!("{prefix}.w_co")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvLstmState {
    pub h: Var,
    pub c: Var,
}

/// Zero-initialized state.
pub fn zero_state(tape: &mut Tape, spec: &ConvLstmSpec) -> ConvLstmState {
    let h = tape.constant(Tensor::zeros(&spec.state_shape()));
    let c = tape.constant(Tensor::zeros(&spec.state_shape()));
    ConvLstmState { h, c }
}

/// One recurrence step on an (1, Cin, H, W) input.
pub fn convlstm_step(
    tape: &mut Tape,
    x: Var,
    prev: ConvLstmState,
    vars: &ConvLstmVars,
    spec: &ConvLstmSpec,
) -> Result<ConvLstmState> {
    let xs = tape.value(x).shape();
    if xs != [1, spec.in_channels, spec.height, spec.width] {
        return Err(Error::shape(
            "convlstm input",
            xs,
            &[1, spec.in_channels, spec.height, spec.width],
        ));
    }
    let gate_pre = |tape: &mut Tape, idx: usize, peephole: Option<(Var, Var)>| -> Result<Var> {
        let from_x = tape.conv2d(x, vars.w_x[idx], Some(vars.b[idx]), spec.x_conv())?;
        let from_h = tape.conv2d(prev.h, vars.w_h[idx], None, spec.h_conv())?;
        let mut pre = tape.add(from_x, from_h)?;
        if let Some((w, state)) = peephole {
            let peek = tape.hadamard(w, state)?;
            pre = tape.add(pre, peek)?;
        }
        Ok(pre)
    };

    let f_pre = gate_pre(tape, 0, Some((vars.w_cf, prev.c)))?;
    let f = tape.sigmoid(f_pre);
    let i_pre = gate_pre(tape, 1, Some((vars.w_ci, prev.c)))?;
    let i = tape.sigmoid(i_pre);
    let cand_pre = gate_pre(tape, 2, None)?;
    let cand = tape.relu(cand_pre);
    let keep = tape.hadamard(f, prev.c)?;
    let write = tape.hadamard(i, cand)?;
    let c = tape.add(keep, write)?;
    // Output-gate peephole reads the fresh cell state.
    let o_pre_base = gate_pre(tape, 3, None)?;
    let o_peek = tape.hadamard(vars.w_co, c)?;
    let o_pre = tape.add(o_pre_base, o_peek)?;
    let o = tape.sigmoid(o_pre);
    let c_act = tape.relu(c);
    let h = tape.hadamard(o, c_act)?;
    Ok(ConvLstmState { h, c })
}

/// Fold the cell left to right over an ordered slice sequence, returning
/// h_1..h_T.
pub fn convlstm_run(
    tape: &mut Tape,
    sequence: &[Var],
    vars: &ConvLstmVars,
    spec: &ConvLstmSpec,
    init: ConvLstmState,
) -> Result<Vec<Var>> {
    if sequence.is_empty() {
        return Err(Error::invalid("convlstm_run on an empty sequence"));
    }
    let mut state = init;
    let mut outputs = Vec::with_capacity(sequence.len());
    for x in sequence {
        state = convlstm_step(tape, *x, state, vars, spec)?;
        outputs.push(state.h);
    }
    Ok(outputs)
}
