//! Finite-difference verification of the analytic gradients. The oracle is
//! a central difference of the forward value and never touches the tape's
//! backward path.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::net::{hybrid_loss, MvttConfig, MvttModel};
use crate::params::{Binding, ParamSet};
use crate::phantom::{generate_phantom, normalize, reslice, PhantomSpec};
use crate::recurrent::{self, ConvLstmSpec, ConvLstmVars};
use crate::tensor::{BatchNormState, BnMode, ConvSpec, Padding, Tape, Tensor, Var};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compare analytic gradients against central finite differences of the
/// scalar-valued `value` closure. Returns the worst relative error over all
/// parameter elements.
pub fn finite_difference_check<FA, FV>(
    params: &ParamSet,
    analytic: FA,
    value: FV,
    step: f64,
) -> Result<f64>
where
    FA: Fn(&ParamSet) -> Result<IndexMap<String, Vec<f64>>>,
    FV: Fn(&ParamSet) -> Result<f64>,
{
    let grads = analytic(params)?;
    let mut worst = 0.0f64;
    for name in params.trainable_names() {
        let n = params.get(&name)?.numel();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name)?.data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(&name)?.data_mut()[i] -= step;
            let fd = (value(&plus)? - value(&minus)?) / (2.0 * step);
            let a = grads[&name][i];
            worst = worst.max(rel_err(a, fd));
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
    )
    .expect("shape")
}

/// Scalar loss used to drive gradients through an intermediate tensor:
/// sum(sigmoid(x)), nonlinear so linear-op errors cannot cancel.
fn squash_sum(tape: &mut Tape, x: Var) -> Var {
    let s = tape.sigmoid(x);
    tape.sum(s)
}

type GraphFn = dyn Fn(&mut Tape, &Binding) -> Result<Var>;

fn check_graph(name: &str, params: ParamSet, graph: &GraphFn, sabotage: bool) -> Result<OpCheck> {
    let analytic = |p: &ParamSet| -> Result<IndexMap<String, Vec<f64>>> {
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, p);
        let loss = graph(&mut tape, &binding)?;
        tape.backward(loss)?;
        let mut grads = binding.grads(&tape, p);
        if sabotage {
            if let Some((_, g)) = grads.iter_mut().next() {
                if let Some(v) = g.first_mut() {
                    *v += 0.05;
                }
            }
        }
        Ok(grads)
    };
    let value = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, p);
        let loss = graph(&mut tape, &binding)?;
        Ok(tape.value(loss).data()[0])
    };
    let max_rel_err = finite_difference_check(&params, analytic, value, FD_STEP)?;
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_err,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

fn conv_check(
    rng: &mut ChaCha8Rng,
    dilation: usize,
    padding: Padding,
    sabotage: bool,
) -> Result<OpCheck> {
    let spec = ConvSpec {
        kernel: (3, 3),
        in_channels: 2,
        out_channels: 2,
        stride: (1, 1),
        dilation,
        padding,
    };
    let (h, w) = (11, 12);
    let mut params = ParamSet::new();
    params.insert("x", rand_tensor(rng, &[1, 2, h, w]));
    params.insert("w", rand_tensor(rng, &[2, 2, 3, 3]));
    params.insert("b", rand_tensor(rng, &[2]));
    let name = format!(
        "conv2d d={} {}",
        dilation,
        match padding {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    );
    check_graph(
        &name,
        params,
        &move |tape, binding| {
            let y = tape.conv2d(binding.var("x"), binding.var("w"), Some(binding.var("b")), spec)?;
            Ok(squash_sum(tape, y))
        },
        sabotage,
    )
}

fn elementwise_checks(rng: &mut ChaCha8Rng, out: &mut Vec<OpCheck>) -> Result<()> {
    let shape = [2, 3, 4];
    {
        let mut params = ParamSet::new();
        params.insert("a", rand_tensor(rng, &shape));
        params.insert("b", rand_tensor(rng, &shape));
        out.push(check_graph(
            "add",
            params,
            &|tape, binding| {
                let y = tape.add(binding.var("a"), binding.var("b"))?;
                Ok(squash_sum(tape, y))
            },
            false,
        )?);
    }
    {
        let mut params = ParamSet::new();
        params.insert("a", rand_tensor(rng, &shape));
        params.insert("b", rand_tensor(rng, &shape));
        out.push(check_graph(
            "hadamard",
            params,
            &|tape, binding| {
                let y = tape.hadamard(binding.var("a"), binding.var("b"))?;
                Ok(squash_sum(tape, y))
            },
            false,
        )?);
    }
    {
        let mut params = ParamSet::new();
        params.insert("a", rand_tensor(rng, &shape));
        // Denominator bounded away from zero so the quotient stays smooth.
        let mut b = rand_tensor(rng, &shape);
        for v in b.data_mut() {
            *v = 1.5 + v.abs();
        }
        params.insert("b", b);
        out.push(check_graph(
            "div",
            params,
            &|tape, binding| {
                let y = tape.div(binding.var("a"), binding.var("b"))?;
                Ok(squash_sum(tape, y))
            },
            false,
        )?);
    }
    {
        let mut params = ParamSet::new();
        params.insert("x", rand_tensor(rng, &shape));
        out.push(check_graph(
            "sigmoid",
            params,
            &|tape, binding| {
                let y = tape.sigmoid(binding.var("x"));
                let z = tape.hadamard(y, y)?;
                Ok(tape.sum(z))
            },
            false,
        )?);
    }
    {
        // Offset keeps every element away from the relu kink where the
        // derivative is not defined.
        let mut params = ParamSet::new();
        let mut x = rand_tensor(rng, &shape);
        for v in x.data_mut() {
            *v += if *v >= 0.0 { 0.5 } else { -0.5 };
        }
        params.insert("x", x);
        out.push(check_graph(
            "relu",
            params,
            &|tape, binding| {
                let y = tape.relu(binding.var("x"));
                Ok(squash_sum(tape, y))
            },
            false,
        )?);
    }
    {
        let mut params = ParamSet::new();
        params.insert("a", rand_tensor(rng, &[1, 2, 3, 4]));
        params.insert("b", rand_tensor(rng, &[1, 3, 3, 4]));
        out.push(check_graph(
            "concat_channels",
            params,
            &|tape, binding| {
                let y = tape.concat(1, &[binding.var("a"), binding.var("b")])?;
                Ok(squash_sum(tape, y))
            },
            false,
        )?);
    }
    {
        let mut params = ParamSet::new();
        params.insert("x", rand_tensor(rng, &[2, 3, 4, 5]));
        out.push(check_graph(
            "permute_axes",
            params,
            &|tape, binding| {
                let y = tape.permute(binding.var("x"), &[1, 3, 0, 2])?;
                let z = tape.hadamard(y, y)?;
                Ok(tape.sum(z))
            },
            false,
        )?);
    }
    {
        let mut params = ParamSet::new();
        params.insert("x", rand_tensor(rng, &[4, 2, 3, 3]));
        params.insert("gamma", rand_tensor(rng, &[2]));
        params.insert("beta", rand_tensor(rng, &[2]));
        out.push(check_graph(
            "batch_norm",
            params,
            &|tape, binding| {
                let mut state = BatchNormState::new(2);
                let y = tape.batch_norm(
                    binding.var("x"),
                    binding.var("gamma"),
                    binding.var("beta"),
                    &mut state,
                    BnMode::Train,
                )?;
                Ok(squash_sum(tape, y))
            },
            false,
        )?);
    }
    Ok(())
}

fn convlstm_check(rng: &mut ChaCha8Rng, sabotage: bool) -> Result<OpCheck> {
    let spec = ConvLstmSpec {
        kernel: 3,
        in_channels: 2,
        hidden_channels: 2,
        height: 4,
        width: 4,
    };
    let mut params = ParamSet::new();
    recurrent::init_params(&mut params, "lstm", &spec, rng);
    // Random peepholes so their gradients are exercised too.
    for g in ["f", "i", "o"] {
        *params.get_mut(&format!("lstm.w_c{g}"))? = rand_tensor(rng, &[1, 2, 4, 4]);
    }
    for t in 0..3 {
        params.insert(format!("x{t}"), rand_tensor(rng, &[1, 2, 4, 4]));
    }
    check_graph(
        "convlstm 3-step unroll",
        params,
        &move |tape, binding| {
            let vars = ConvLstmVars::bind(binding, "lstm");
            let xs: Vec<Var> = (0..3).map(|t| binding.var(&format!("x{t}"))).collect();
            let init = recurrent::zero_state(tape, &spec);
            let hs = recurrent::convlstm_run(tape, &xs, &vars, &spec, init)?;
            let last = *hs.last().expect("nonempty");
            Ok(squash_sum(tape, last))
        },
        sabotage,
    )
}

fn full_model_check(sabotage: bool) -> Result<OpCheck> {
    let mut spec = PhantomSpec::desk_scale(11);
    spec.dims = (3, 6, 6);
    spec.spacing_mm = (2.0, 1.0, 1.0);
    spec.semi_axes_mm = (2.0, 2.0, 2.0);
    spec.center_mm = (3.0, 3.0, 3.0);
    spec.pv_stub_count = 0;
    spec.scar_patch_count = 2;
    spec.scar_angular_extent_rad = 1.5;
    let phantom = generate_phantom(&spec)?;
    let normalized = normalize(&phantom.intensity)?;
    let views = reslice(&normalized);

    let model = MvttModel::new(MvttConfig::desk_scale(2), spec.dims, 5)?;
    let g_l = {
        let v = &phantom.anatomy_gt;
        Tensor::new(vec![3, 1, 6, 6], v.values().to_vec())?
    };
    let g_as = {
        let v = &phantom.scar_gt;
        Tensor::new(vec![3, 1, 6, 6], v.values().to_vec())?
    };

    let loss_of = |p: &ParamSet, want_grads: bool| -> Result<(f64, IndexMap<String, Vec<f64>>)> {
        let mut m = model.clone();
        m.params = p.clone();
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &views, BnMode::Train)?;
        let gl = tape.constant(g_l.clone());
        let gas = tape.constant(g_as.clone());
        let loss = hybrid_loss(&mut tape, pass.m_l, gl, pass.m_as, gas)?;
        let value = tape.value(loss).data()[0];
        let grads = if want_grads {
            tape.backward(loss)?;
            pass.binding.grads(&tape, p)
        } else {
            IndexMap::new()
        };
        Ok((value, grads))
    };

    let params = model.params.clone();
    let max_rel_err = finite_difference_check(
        &params,
        |p| {
            let (_, mut grads) = loss_of(p, true)?;
            if sabotage {
                if let Some((_, g)) = grads.iter_mut().next() {
                    if let Some(v) = g.first_mut() {
                        *v += 0.05;
                    }
                }
            }
            Ok(grads)
        },
        |p| loss_of(p, false).map(|(v, _)| v),
        FD_STEP,
    )?;
    Ok(OpCheck {
        name: "full model (C=2, 3x6x6)".to_string(),
        max_rel_err,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

/// Run the whole gradient verification suite. `sabotage` names a check
/// whose analytic gradient is deliberately perturbed; it exists so the
/// suite's sensitivity can itself be tested.
pub fn run_suite(sabotage: Option<&str>) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();
    for d in [1usize, 2, 5] {
        for padding in [Padding::Same, Padding::Valid] {
            let sab = sabotage == Some("conv2d") && d == 1 && padding == Padding::Same;
            out.push(conv_check(&mut rng, d, padding, sab)?);
        }
    }
    elementwise_checks(&mut rng, &mut out)?;
    out.push(convlstm_check(&mut rng, sabotage == Some("convlstm"))?);
    out.push(full_model_check(sabotage == Some("full_model"))?);
    Ok(out)
}
