//! The forecasting model: a bidirectional first recurrent layer, a
//! unidirectional second layer, and a convolutional decoder.
//!
//! Each cell step reconstructs missing variables (attention interpolation),
//! weights the reconstruction by Monte Carlo uncertainty, and runs three
//! gate-specific dual-graph convolutions:
//!
//!   f_t = GeLU(GGCN_f(u))            update gate
//!   r_t = GeLU(GGCN_r(u))            output gate
//!   c_t = f_t.c_prev + (1-f_t).GGCN_c(u)
//!   h_t = (1-r_t).u + r_t.ELU(c_t)
//!
//! with u the uncertainty-weighted input, computed once per step and shared
//! by all four equations (`resample_per_gate` switches to a fresh draw per
//! equation). The dynamic graph is rebuilt from u at every step.

use crate::autodiff::{Tape, VarId};
use crate::error::{IbnError, Result};
use crate::graph::{adaptive_adjacency_tape, gaussian_adjacency_tape, ggcn_apply};
use crate::imputation::{interpolation_attention, uai_forward, UaiConfig};
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::{DropoutKey, DropoutStreams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Variable count N.
    pub n: usize,
    /// History length H.
    pub h: usize,
    /// Forecast horizon L.
    pub l: usize,
    /// Raw input channels per variable C.
    pub c: usize,
    /// Hidden width D.
    pub d: usize,
    /// Node embedding width for the attention interpolation.
    pub embed_dim: usize,
    /// Dropout rate for the Monte Carlo passes.
    pub p: f64,
    /// Monte Carlo sample count S.
    pub s: usize,
    /// Single shared weight matrix for both graph-convolution branches.
    pub tie_ggcn_weights: bool,
    /// Draw a fresh uncertainty-weighted input per gate equation instead of
    /// sharing one draw across the step.
    pub resample_per_gate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 12,
            h: 12,
            l: 3,
            c: 1,
            d: 16,
            embed_dim: 8,
            p: 0.1,
            s: 10,
            tie_ggcn_weights: false,
            resample_per_gate: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n", self.n),
            ("h", self.h),
            ("l", self.l),
            ("c", self.c),
            ("d", self.d),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(IbnError::invalid(format!("model.{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(IbnError::invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.p
            )));
        }
        if self.s == 0 {
            return Err(IbnError::invalid("Monte Carlo sample count must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Replace the uncertainty weighting with a plain deterministic pass.
    pub uai_to_ia: bool,
    /// Replace the Gaussian-kernel dynamic graph with a self-learned
    /// embedding-product adjacency.
    pub ggcn_to_agcn: bool,
    /// Drop the backward recurrent branch.
    pub bi_to_uni: bool,
}

/// Source of the per-step dynamic adjacency.
#[derive(Clone, Copy, Debug)]
pub enum DynGraph {
    Gaussian { gamma: f64 },
    Adaptive { e1: ParamId, e2: ParamId },
}

#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w_pre: ParamId,
    pub w_gau: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct IaCellParams {
    pub embed: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// Parameters of one recurrent cell. Shared across its time steps.
#[derive(Clone, Copy, Debug)]
pub struct CellParams {
    /// Attention interpolation; present on first-layer cells only. Second
    /// layer inputs are dense hidden states, so interpolation is a no-op.
    pub ia: Option<IaCellParams>,
    pub uai_w: ParamId,
    pub uai_b: ParamId,
    /// Gate convolutions in f, r, c order.
    pub gates: [GateParams; 3],
    pub dyn_graph: DynGraph,
    /// Feature width the cell operates at.
    pub width: usize,
    /// Dropout substream tags. `direction_tag` is independent of the
    /// iteration direction so tests can tie substreams across directions.
    pub layer_tag: u8,
    pub direction_tag: u8,
    pub resample_per_gate: bool,
}

/// Test hooks: pin a gate to a constant, bypassing its convolution.
#[derive(Clone, Copy, Debug, Default)]
pub struct CellHooks {
    pub force_f: Option<f64>,
    pub force_r: Option<f64>,
}

/// Values a cell step exposes beyond (h, c): the uncertainty-weighted
/// input feeding the h equation, its sigma, and the dynamic adjacency.
pub struct StepInfo {
    pub u: VarId,
    pub sigma: VarId,
    pub a_dyn: VarId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One cell invocation. `step` is the 1-based processing-step index used
/// to key dropout substreams; `x_t` is N x C raw input at layer 1 or the
/// concatenated hidden state at layer 2.
#[allow(clippy::too_many_arguments)]
pub fn ibn_cell_step(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    x_t: VarId,
    mask: &[bool],
    c_prev: VarId,
    cell: &CellParams,
    a_pre: VarId,
    uai_cfg: &UaiConfig,
    streams: &DropoutStreams,
    step: u32,
    hooks: &CellHooks,
) -> Result<(VarId, VarId, StepInfo)> {
    let x_ia = match cell.ia {
        Some(ia) => {
            let embed = binder.get(tape, store, ia.embed);
            let w = binder.get(tape, store, ia.proj_w);
            let b = binder.get(tape, store, ia.proj_b);
            interpolation_attention(tape, x_t, mask, embed, Some((w, b)))?
        }
        None => x_t,
    };
    if tape.shape(x_ia) != [mask.len(), cell.width] {
        return Err(IbnError::ShapeMismatch {
            op: "ibn_cell_step",
            lhs: tape.shape(x_ia).to_vec(),
            rhs: vec![mask.len(), cell.width],
        });
    }
    if tape.shape(c_prev) != tape.shape(x_ia) {
        return Err(IbnError::ShapeMismatch {
            op: "ibn_cell_step",
            lhs: tape.shape(c_prev).to_vec(),
            rhs: tape.shape(x_ia).to_vec(),
        });
    }

    let uai_w = binder.get(tape, store, cell.uai_w);
    let uai_b = binder.get(tape, store, cell.uai_b);
    let key = |gate: u8| DropoutKey {
        layer: cell.layer_tag,
        direction: cell.direction_tag,
        step,
        sample: 0,
        gate,
    };

    // One draw shared by all four equations, or four independent draws
    // (f, r, c, h) when resampling per gate.
    let draw = |tape: &mut Tape, gate: u8| {
        uai_forward(tape, x_ia, uai_w, uai_b, uai_cfg, streams, key(gate))
    };
    let (u_f, u_r, u_c, u_h) = if cell.resample(uai_cfg) {
        let f = draw(tape, 1)?;
        let r = draw(tape, 2)?;
        let c = draw(tape, 3)?;
        let h = draw(tape, 4)?;
        (f, r, c, h)
    } else {
        let shared = draw(tape, 0)?;
        let (mu, sigma, x_hat) = (shared.mu, shared.sigma, shared.x_hat);
        let mk = || crate::imputation::UaiOutput { mu, sigma, x_hat };
        (mk(), mk(), mk(), mk())
    };

    let a_dyn_for = |tape: &mut Tape, binder: &mut Binder, u: VarId| -> Result<VarId> {
        match cell.dyn_graph {
            DynGraph::Gaussian { gamma } => gaussian_adjacency_tape(tape, u, gamma),
            DynGraph::Adaptive { e1, e2 } => {
                let e1v = binder.get(tape, store, e1);
                let e2v = binder.get(tape, store, e2);
                adaptive_adjacency_tape(tape, e1v, e2v)
            }
        }
    };

    let gate_out = |tape: &mut Tape,
                    binder: &mut Binder,
                    u: VarId,
                    a_dyn: VarId,
                    g: &GateParams|
     -> Result<VarId> {
        let w_pre = binder.get(tape, store, g.w_pre);
        let w_gau = binder.get(tape, store, g.w_gau);
        ggcn_apply(tape, a_pre, a_dyn, u, w_pre, w_gau)
    };

    let shape = tape.shape(u_h.x_hat).to_vec();
    let a_dyn_shared = a_dyn_for(tape, binder, u_h.x_hat)?;

    let f_t = match hooks.force_f {
        Some(v) => tape.constant(Tensor::full(&shape, v)),
        None => {
            let a_dyn = if cell.resample(uai_cfg) {
                a_dyn_for(tape, binder, u_f.x_hat)?
            } else {
                a_dyn_shared
            };
            let conv = gate_out(tape, binder, u_f.x_hat, a_dyn, &cell.gates[0])?;
            tape.gelu(conv)
        }
    };
    let r_t = match hooks.force_r {
        Some(v) => tape.constant(Tensor::full(&shape, v)),
        None => {
            let a_dyn = if cell.resample(uai_cfg) {
                a_dyn_for(tape, binder, u_r.x_hat)?
            } else {
                a_dyn_shared
            };
            let conv = gate_out(tape, binder, u_r.x_hat, a_dyn, &cell.gates[1])?;
            tape.gelu(conv)
        }
    };
    let c_conv = {
        let a_dyn = if cell.resample(uai_cfg) {
            a_dyn_for(tape, binder, u_c.x_hat)?
        } else {
            a_dyn_shared
        };
        gate_out(tape, binder, u_c.x_hat, a_dyn, &cell.gates[2])?
    };

    let keep = tape.mul(f_t, c_prev)?;
    let one_minus_f = tape.affine(f_t, -1.0, 1.0);
    let fresh = tape.mul(one_minus_f, c_conv)?;
    let c_t = tape.add(keep, fresh)?;

    let one_minus_r = tape.affine(r_t, -1.0, 1.0);
    let pass = tape.mul(one_minus_r, u_h.x_hat)?;
    let c_act = tape.elu(c_t);
    let gated = tape.mul(r_t, c_act)?;
    let h_t = tape.add(pass, gated)?;

    Ok((
        h_t,
        c_t,
        StepInfo {
            u: u_h.x_hat,
            sigma: u_h.sigma,
            a_dyn: a_dyn_shared,
        },
    ))
}

impl CellParams {
    fn resample(&self, _cfg: &UaiConfig) -> bool {
        self.resample_per_gate
    }
}

/// Run one recurrent cell over a sequence. `seq` holds one tape node per
/// original time position; the returned hidden states (and step infos) are
/// indexed by original position regardless of direction.
#[allow(clippy::too_many_arguments)]
pub fn run_ru(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    seq: &[VarId],
    mask: &[bool],
    cell: &CellParams,
    a_pre: VarId,
    uai_cfg: &UaiConfig,
    streams: &DropoutStreams,
    direction: Direction,
) -> Result<(Vec<VarId>, Vec<StepInfo>)> {
    if seq.is_empty() {
        return Err(IbnError::invalid("empty sequence"));
    }
    let h_len = seq.len();
    let n = mask.len();
    let mut hidden: Vec<Option<VarId>> = vec![None; h_len];
    let mut infos: Vec<Option<StepInfo>> = (0..h_len).map(|_| None).collect();
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..h_len).collect(),
        Direction::Backward => (0..h_len).rev().collect(),
    };
    let mut c = tape.constant(Tensor::zeros(&[n, cell.width]));
    let hooks = CellHooks::default();
    for (proc_idx, &t) in order.iter().enumerate() {
        let (h_t, c_t, info) = ibn_cell_step(
            tape,
            binder,
            store,
            seq[t],
            mask,
            c,
            cell,
            a_pre,
            uai_cfg,
            streams,
            (proc_idx + 1) as u32,
            &hooks,
        )?;
        hidden[t] = Some(h_t);
        infos[t] = Some(info);
        c = c_t;
    }
    Ok((
        hidden.into_iter().map(Option::unwrap).collect(),
        infos.into_iter().map(Option::unwrap).collect(),
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderParams {
    /// Kernel [L, 2, W]: one 1 x W filter per output step and input channel.
    pub conv1_k: ParamId,
    pub conv1_b: ParamId,
    /// Kernel [L, L]: 1 x 1 channel mixing.
    pub conv2_k: ParamId,
    pub conv2_b: ParamId,
}

/// Decoder: channel 1 is the first layer's final hidden pair, channel 2
/// the second layer's final hidden. A 1 x W convolution with valid padding
/// collapses the width, so each output channel is a dot product per node;
/// the 1 x 1 second convolution mixes channels. GeLU between the two.
pub fn decode(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    h1: VarId,
    h2: VarId,
    dec: &DecoderParams,
) -> Result<VarId> {
    if tape.shape(h1) != tape.shape(h2) {
        return Err(IbnError::ShapeMismatch {
            op: "decode",
            lhs: tape.shape(h1).to_vec(),
            rhs: tape.shape(h2).to_vec(),
        });
    }
    let k = binder.get(tape, store, dec.conv1_k);
    let [l, channels, w] = *tape.shape(k) else {
        return Err(IbnError::invalid("decoder kernel must be rank 3"));
    };
    if channels != 2 || tape.shape(h1)[1] != w {
        return Err(IbnError::ShapeMismatch {
            op: "decode",
            lhs: tape.shape(h1).to_vec(),
            rhs: vec![l, channels, w],
        });
    }
    let b1 = binder.get(tape, store, dec.conv1_b);
    let k2 = binder.get(tape, store, dec.conv2_k);
    let b2 = binder.get(tape, store, dec.conv2_b);

    let channel_term = |tape: &mut Tape, h: VarId, ch: usize| -> Result<VarId> {
        let sl = tape.slice(k, 1, ch, 1)?;
        let flat = tape.reshape(sl, &[l, w])?;
        let kt = tape.transpose(flat)?;
        tape.matmul(h, kt)
    };
    let t1 = channel_term(tape, h1, 0)?;
    let t2 = channel_term(tape, h2, 1)?;
    let summed = tape.add(t1, t2)?;
    let out1 = tape.add_bias(summed, b1)?;
    let act = tape.gelu(out1);
    let k2t = tape.transpose(k2)?;
    let mixed = tape.matmul(act, k2t)?;
    let out2 = tape.add_bias(mixed, b2)?;
    Ok(out2)
}

/// Per-forward-pass observability: first-layer reconstructions, sigmas,
/// and adjacencies by original time position. Backward entries are empty
/// when the backward branch is ablated away.
#[derive(Default)]
pub struct ForwardTrace {
    pub u_fwd: Vec<Tensor>,
    pub u_bwd: Vec<Tensor>,
    pub sigma_fwd: Vec<Tensor>,
    pub sigma_bwd: Vec<Tensor>,
    pub a_dyn_fwd: Vec<Tensor>,
}

pub struct ForwardPass {
    pub tape: Tape,
    pub binder: Binder,
    pub y_hat: VarId,
}

pub struct ForecastModel {
    pub cfg: ModelConfig,
    pub ablation: AblationFlags,
    pub store: ParamStore,
    pub a_pre: Tensor,
    pub layer1_fwd: CellParams,
    pub layer1_bwd: Option<CellParams>,
    pub layer2: CellParams,
    pub decoder: DecoderParams,
}

impl ForecastModel {
    pub fn new(
        cfg: ModelConfig,
        ablation: AblationFlags,
        a_pre: Tensor,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if a_pre.shape() != [cfg.n, cfg.n] {
            return Err(IbnError::ShapeMismatch {
                op: "predefined adjacency",
                lhs: a_pre.shape().to_vec(),
                rhs: vec![cfg.n, cfg.n],
            });
        }
        let mut store = ParamStore::new();
        let layer1_fwd = register_cell(
            &mut store, &cfg, &ablation, "layer1.fwd", cfg.d, true, 1, 0, seed,
        )?;
        let layer1_bwd = if ablation.bi_to_uni {
            None
        } else {
            Some(register_cell(
                &mut store, &cfg, &ablation, "layer1.bwd", cfg.d, true, 1, 1, seed,
            )?)
        };
        let layer2_width = if ablation.bi_to_uni { cfg.d } else { 2 * cfg.d };
        let layer2 = register_cell(
            &mut store, &cfg, &ablation, "layer2", layer2_width, false, 2, 0, seed,
        )?;
        let conv1_k = store.register("decoder.conv1.kernel", &[cfg.l, 2, layer2_width], seed)?;
        let conv1_b = store.register("decoder.conv1.bias", &[cfg.l], seed)?;
        let conv2_k = store.register("decoder.conv2.kernel", &[cfg.l, cfg.l], seed)?;
        let conv2_b = store.register("decoder.conv2.bias", &[cfg.l], seed)?;
        Ok(ForecastModel {
            cfg,
            ablation,
            store,
            a_pre,
            layer1_fwd,
            layer1_bwd,
            layer2,
            decoder: DecoderParams {
                conv1_k,
                conv1_b,
                conv2_k,
                conv2_b,
            },
        })
    }

    pub fn uai_cfg(&self, deterministic: bool) -> UaiConfig {
        UaiConfig {
            p: self.cfg.p,
            s: self.cfg.s,
            deterministic: deterministic || self.ablation.uai_to_ia,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mask: &[bool],
        streams: &DropoutStreams,
    ) -> Result<ForwardPass> {
        self.forward_opts(x, mask, streams, false, None)
    }

    /// `deterministic` forces single no-dropout passes everywhere (used by
    /// diagnostics to define a noise-free reference output).
    pub fn forward_opts(
        &self,
        x: &Tensor,
        mask: &[bool],
        streams: &DropoutStreams,
        deterministic: bool,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        if x.shape() != [cfg.n, cfg.h, cfg.c] {
            return Err(IbnError::ShapeMismatch {
                op: "forward input",
                lhs: x.shape().to_vec(),
                rhs: vec![cfg.n, cfg.h, cfg.c],
            });
        }
        if mask.len() != cfg.n {
            return Err(IbnError::invalid(format!(
                "mask length {} does not match {} variables",
                mask.len(),
                cfg.n
            )));
        }
        let uai = self.uai_cfg(deterministic);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let a_pre = tape.constant(self.a_pre.clone());

        // Per-position raw inputs as constants; data is never differentiated.
        let steps: Vec<VarId> = (0..cfg.h)
            .map(|t| {
                let mut data = Vec::with_capacity(cfg.n * cfg.c);
                for node in 0..cfg.n {
                    let base = node * cfg.h * cfg.c + t * cfg.c;
                    data.extend_from_slice(&x.data()[base..base + cfg.c]);
                }
                tape.constant(Tensor::new(vec![cfg.n, cfg.c], data).unwrap())
            })
            .collect();

        let (hid_fwd, info_fwd) = run_ru(
            &mut tape,
            &mut binder,
            &self.store,
            &steps,
            mask,
            &self.layer1_fwd,
            a_pre,
            &uai,
            streams,
            Direction::Forward,
        )?;
        let hid_bwd = match &self.layer1_bwd {
            Some(cell) => {
                let (hid, info) = run_ru(
                    &mut tape,
                    &mut binder,
                    &self.store,
                    &steps,
                    mask,
                    cell,
                    a_pre,
                    &uai,
                    streams,
                    Direction::Backward,
                )?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.u_bwd = info.iter().map(|i| tape.value(i.u).clone()).collect();
                    tr.sigma_bwd = info.iter().map(|i| tape.value(i.sigma).clone()).collect();
                }
                Some(hid)
            }
            None => None,
        };
        if let Some(tr) = trace.as_deref_mut() {
            tr.u_fwd = info_fwd.iter().map(|i| tape.value(i.u).clone()).collect();
            tr.sigma_fwd = info_fwd.iter().map(|i| tape.value(i.sigma).clone()).collect();
            tr.a_dyn_fwd = info_fwd.iter().map(|i| tape.value(i.a_dyn).clone()).collect();
        }

        // Second layer consumes the (concatenated) first-layer hidden
        // sequence; every variable is observed from here on.
        let layer2_in: Vec<VarId> = match &hid_bwd {
            Some(bwd) => (0..cfg.h)
                .map(|t| tape.concat(&[hid_fwd[t], bwd[t]]))
                .collect::<Result<_>>()?,
            None => hid_fwd.clone(),
        };
        let all_observed = vec![true; cfg.n];
        let (hid2, _) = run_ru(
            &mut tape,
            &mut binder,
            &self.store,
            &layer2_in,
            &all_observed,
            &self.layer2,
            a_pre,
            &uai,
            streams,
            Direction::Forward,
        )?;

        let h1_final = layer2_in[cfg.h - 1];
        let h2_final = hid2[cfg.h - 1];
        let y_hat = decode(
            &mut tape,
            &mut binder,
            &self.store,
            h1_final,
            h2_final,
            &self.decoder,
        )?;
        Ok(ForwardPass {
            tape,
            binder,
            y_hat,
        })
    }
}

fn register_cell(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    ablation: &AblationFlags,
    prefix: &str,
    width: usize,
    with_ia: bool,
    layer_tag: u8,
    direction_tag: u8,
    seed: u64,
) -> Result<CellParams> {
    let ia = if with_ia {
        Some(IaCellParams {
            embed: store.register(&format!("{prefix}.ia.embed"), &[cfg.n, cfg.embed_dim], seed)?,
            proj_w: store.register(&format!("{prefix}.ia.proj_w"), &[cfg.c, width], seed)?,
            proj_b: store.register(&format!("{prefix}.ia.proj_b"), &[width], seed)?,
        })
    } else {
        None
    };
    let uai_w = store.register(&format!("{prefix}.uai.w"), &[width, width], seed)?;
    let uai_b = store.register(&format!("{prefix}.uai.b"), &[width], seed)?;
    let mut gate = |name: &str| -> Result<GateParams> {
        let w_pre = store.register(&format!("{prefix}.{name}.w_pre"), &[width, width], seed)?;
        let w_gau = if cfg.tie_ggcn_weights {
            w_pre
        } else {
            store.register(&format!("{prefix}.{name}.w_gau"), &[width, width], seed)?
        };
        Ok(GateParams { w_pre, w_gau })
    };
    let gates = [gate("gate_f")?, gate("gate_r")?, gate("gate_c")?];
    let dyn_graph = if ablation.ggcn_to_agcn {
        DynGraph::Adaptive {
            e1: store.register(&format!("{prefix}.agcn.e1"), &[cfg.n, cfg.embed_dim], seed)?,
            e2: store.register(&format!("{prefix}.agcn.e2"), &[cfg.n, cfg.embed_dim], seed)?,
        }
    } else {
        DynGraph::Gaussian {
            gamma: width as f64,
        }
    };
    Ok(CellParams {
        ia,
        uai_w,
        uai_b,
        gates,
        dyn_graph,
        width,
        layer_tag,
        direction_tag,
        resample_per_gate: cfg.resample_per_gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_predefined;

    fn toy_a_pre(n: usize) -> Tensor {
        let coords: Vec<f64> = (0..n)
            .flat_map(|i| {
                let a = i as f64 * 0.37;
                [a.sin() * 0.5 + 0.5, a.cos() * 0.5 + 0.5]
            })
            .collect();
        build_predefined(&Tensor::new(vec![n, 2], coords).unwrap(), 1.0).unwrap()
    }

    fn toy_model(n: usize, h: usize, l: usize, d: usize) -> ForecastModel {
        let cfg = ModelConfig {
            n,
            h,
            l,
            c: 1,
            d,
            embed_dim: 4,
            p: 0.1,
            s: 3,
            ..ModelConfig::default()
        };
        ForecastModel::new(cfg, AblationFlags::default(), toy_a_pre(n), 7).unwrap()
    }

    fn streams() -> DropoutStreams {
        DropoutStreams::train(11, 0, 0)
    }

    fn toy_input(n: usize, h: usize) -> Tensor {
        Tensor::new(
            vec![n, h, 1],
            (0..n * h).map(|i| ((i * 13 % 17) as f64) * 0.2 - 1.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forced_update_gate_preserves_cell_state() {
        let model = toy_model(4, 3, 2, 5);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let a_pre = tape.constant(model.a_pre.clone());
        let x_t = tape.constant(Tensor::new(vec![4, 1], vec![0.5, -0.2, 0.9, 0.1]).unwrap());
        let c_prev_t = Tensor::new(
            vec![4, 5],
            (0..20).map(|i| i as f64 * 0.1 - 1.0).collect(),
        )
        .unwrap();
        let c_prev = tape.constant(c_prev_t.clone());
        let mask = [true, true, false, true];
        let hooks = CellHooks {
            force_f: Some(1.0),
            force_r: None,
        };
        let (_, c_t, _) = ibn_cell_step(
            &mut tape,
            &mut binder,
            &model.store,
            x_t,
            &mask,
            c_prev,
            &model.layer1_fwd,
            a_pre,
            &model.uai_cfg(false),
            &streams(),
            1,
            &hooks,
        )
        .unwrap();
        assert_eq!(tape.value(c_t).data(), c_prev_t.data());
    }

    #[test]
    fn forced_output_gate_passes_weighted_input_through() {
        let model = toy_model(4, 3, 2, 5);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let a_pre = tape.constant(model.a_pre.clone());
        let x_t = tape.constant(Tensor::new(vec![4, 1], vec![0.5, -0.2, 0.9, 0.1]).unwrap());
        let c_prev = tape.constant(Tensor::zeros(&[4, 5]));
        let mask = [true, false, true, true];
        let hooks = CellHooks {
            force_f: None,
            force_r: Some(0.0),
        };
        let (h_t, _, info) = ibn_cell_step(
            &mut tape,
            &mut binder,
            &model.store,
            x_t,
            &mask,
            c_prev,
            &model.layer1_fwd,
            a_pre,
            &model.uai_cfg(false),
            &streams(),
            1,
            &hooks,
        )
        .unwrap();
        assert_eq!(tape.value(h_t).data(), tape.value(info.u).data());
    }

    #[test]
    fn zero_parameters_zero_input_is_a_fixed_point() {
        let mut model = toy_model(3, 2, 1, 4);
        let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let z = Tensor::zeros(model.store.value(id).shape());
            model.store.set_value(id, z).unwrap();
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let a_pre = tape.constant(model.a_pre.clone());
        let x_t = tape.constant(Tensor::zeros(&[3, 1]));
        let c_prev = tape.constant(Tensor::zeros(&[3, 4]));
        let (h_t, c_t, _) = ibn_cell_step(
            &mut tape,
            &mut binder,
            &model.store,
            x_t,
            &[true, true, true],
            c_prev,
            &model.layer1_fwd,
            a_pre,
            &model.uai_cfg(false),
            &streams(),
            1,
            &CellHooks::default(),
        )
        .unwrap();
        assert!(tape.value(h_t).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c_t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_sequences_agree_across_directions() {
        // With H = 1 both directions process the same single input at the
        // same substream step, so hidden states match bit for bit.
        let model = toy_model(3, 1, 1, 4);
        let run = |direction: Direction| {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let a_pre = tape.constant(model.a_pre.clone());
            let x = tape.constant(Tensor::new(vec![3, 1], vec![0.4, -0.7, 0.2]).unwrap());
            let (hid, _) = run_ru(
                &mut tape,
                &mut binder,
                &model.store,
                &[x],
                &[true, true, false],
                &model.layer1_fwd,
                a_pre,
                &model.uai_cfg(false),
                &streams(),
                direction,
            )
            .unwrap();
            tape.value(hid[0]).clone()
        };
        let f = run(Direction::Forward);
        let b = run(Direction::Backward);
        assert_eq!(f.data(), b.data());
    }

    #[test]
    fn backward_on_reversed_input_mirrors_forward_run() {
        // Same parameters, same direction tag: a backward sweep over the
        // reversed sequence must reproduce the forward sweep's hidden
        // states in reversed positions (dropout substreams are keyed by
        // processing step, not original position).
        let model = toy_model(3, 4, 1, 4);
        let xs: Vec<Tensor> = (0..4)
            .map(|t| {
                Tensor::new(
                    vec![3, 1],
                    vec![0.3 * t as f64 - 0.5, 0.1 * t as f64, -0.2 * t as f64 + 0.4],
                )
                .unwrap()
            })
            .collect();
        let mask = [true, false, true];

        let run = |inputs: &[Tensor], direction: Direction| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let a_pre = tape.constant(model.a_pre.clone());
            let seq: Vec<VarId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let (hid, _) = run_ru(
                &mut tape,
                &mut binder,
                &model.store,
                &seq,
                &mask,
                &model.layer1_fwd,
                a_pre,
                &model.uai_cfg(false),
                &streams(),
                direction,
            )
            .unwrap();
            hid.iter().map(|&h| tape.value(h).clone()).collect()
        };

        let fwd = run(&xs, Direction::Forward);
        let rev_inputs: Vec<Tensor> = xs.iter().rev().cloned().collect();
        let bwd_on_rev = run(&rev_inputs, Direction::Backward);
        for t in 0..4 {
            assert_eq!(fwd[t].data(), bwd_on_rev[4 - 1 - t].data(), "position {t}");
        }
    }

    #[test]
    fn cell_state_carries_memory_across_steps() {
        // Step 2 sees only x_2 and c_1. With x_2 zeroed in both runs, any
        // difference in h_2 must have traveled through the cell state.
        // Biases are pushed off zero so the gates do not vanish at zero
        // input (gelu(0) = 0 would close the f gate entirely).
        let mut model = toy_model(3, 2, 1, 4);
        let bias_names: Vec<String> = model
            .store
            .iter()
            .filter(|(_, name, t)| t.rank() == 1 && name.contains("layer1.fwd"))
            .map(|(_, name, _)| name.to_string())
            .collect();
        for (k, name) in bias_names.iter().enumerate() {
            let id = model.store.lookup(name).unwrap();
            let shape = model.store.value(id).shape().to_vec();
            let v = Tensor::full(&shape, 0.3 + 0.1 * k as f64);
            model.store.set_value(id, v).unwrap();
        }
        let mask = [true, true, true];
        let run = |x1: [f64; 3]| {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let a_pre = tape.constant(model.a_pre.clone());
            let seq = vec![
                tape.constant(Tensor::new(vec![3, 1], x1.to_vec()).unwrap()),
                tape.constant(Tensor::zeros(&[3, 1])),
            ];
            let (hid, _) = run_ru(
                &mut tape,
                &mut binder,
                &model.store,
                &seq,
                &mask,
                &model.layer1_fwd,
                a_pre,
                &model.uai_cfg(false),
                &streams(),
                Direction::Forward,
            )
            .unwrap();
            tape.value(hid[1]).clone()
        };
        let h2_a = run([1.0, -0.8, 0.6]);
        let h2_b = run([-0.4, 0.9, 0.1]);
        assert!(h2_a.data().iter().any(|&v| v != 0.0));
        assert_ne!(h2_a.data(), h2_b.data());
    }

    #[test]
    fn output_shape_is_n_by_l() {
        for (n, h, l, d) in [(3, 2, 1, 4), (5, 4, 3, 6), (2, 1, 2, 3)] {
            let model = toy_model(n, h, l, d);
            let x = toy_input(n, h);
            let mask = vec![true; n];
            let pass = model.forward(&x, &mask, &streams()).unwrap();
            assert_eq!(pass.tape.shape(pass.y_hat), [n, l]);
        }
    }

    #[test]
    fn zero_decoder_broadcasts_bias() {
        let mut model = toy_model(4, 3, 1, 4);
        let k1 = model.decoder.conv1_k;
        let b2 = model.decoder.conv2_b;
        let k2 = model.decoder.conv2_k;
        model
            .store
            .set_value(k1, Tensor::zeros(&[1, 2, 8]))
            .unwrap();
        model.store.set_value(k2, Tensor::zeros(&[1, 1])).unwrap();
        model
            .store
            .set_value(b2, Tensor::new(vec![1], vec![3.25]).unwrap())
            .unwrap();
        let x = toy_input(4, 3);
        let pass = model.forward(&x, &[true; 4], &streams()).unwrap();
        assert_eq!(pass.tape.value(pass.y_hat).data(), &[3.25; 4]);
    }

    #[test]
    fn identity_second_conv_returns_first_conv_output() {
        // conv2 = identity channel mix with zero bias: y equals gelu's
        // input mapped through... identity after activation, i.e. the
        // decoder reduces to gelu(conv1). Verify against a manual decode.
        let model = toy_model(3, 2, 2, 4);
        let x = toy_input(3, 2);
        let mask = [true, true, true];

        // run forward once to get the final hiddens, then decode twice
        let pass = model.forward(&x, &mask, &streams()).unwrap();
        let y_full = pass.tape.value(pass.y_hat).clone();

        let mut model2 = toy_model(3, 2, 2, 4);
        model2.store.set_value(model2.decoder.conv2_k, Tensor::eye(2)).unwrap();
        model2
            .store
            .set_value(model2.decoder.conv2_b, Tensor::zeros(&[2]))
            .unwrap();
        let pass2 = model2.forward(&x, &mask, &streams()).unwrap();
        let y_identity = pass2.tape.value(pass2.y_hat).clone();
        // identity mixing keeps gelu(conv1) untouched; full model transforms it
        assert_ne!(y_full.data(), y_identity.data());
        // direct check: recompute conv1+gelu by hand for model2
        // (kernels random, so just verify shape and finiteness here;
        // the arithmetic identity is covered by hand_set_decoder_kernels)
        assert!(y_identity.all_finite());
    }

    #[test]
    fn hand_set_decoder_kernels_match_dot_products() {
        // N=2, W=2, L=1: y[n] = gelu(h1[n].k1 + h2[n].k2 + b1) * k2x + b2
        let mut store = ParamStore::new();
        let conv1_k = store.push(
            "k1",
            Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
        );
        let conv1_b = store.push("b1", Tensor::new(vec![1], vec![0.1]).unwrap());
        let conv2_k = store.push("k2", Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let conv2_b = store.push("b2", Tensor::new(vec![1], vec![-0.2]).unwrap());
        let dec = DecoderParams {
            conv1_k,
            conv1_b,
            conv2_k,
            conv2_b,
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let h1 = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, -0.5, 0.5]).unwrap());
        let h2 = tape.constant(Tensor::new(vec![2, 2], vec![0.5, -1.0, 1.5, 2.0]).unwrap());
        let y = decode(&mut tape, &mut binder, &store, h1, h2, &dec).unwrap();
        let expect = |a: [f64; 2], b: [f64; 2]| {
            let c1 = a[0] * 0.5 + a[1] * -1.0 + b[0] * 2.0 + b[1] * 0.25 + 0.1;
            crate::autodiff::gelu_scalar(c1) * 3.0 - 0.2
        };
        let got = tape.value(y).data();
        assert!((got[0] - expect([1.0, 2.0], [0.5, -1.0])).abs() < 1e-12);
        assert!((got[1] - expect([-0.5, 0.5], [1.5, 2.0])).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_forward_is_bit_identical() {
        let model = toy_model(4, 3, 2, 5);
        let x = toy_input(4, 3);
        let mask = [true, false, true, true];
        let y1 = model.forward(&x, &mask, &streams()).unwrap();
        let y2 = model.forward(&x, &mask, &streams()).unwrap();
        assert_eq!(
            y1.tape.value(y1.y_hat).data(),
            y2.tape.value(y2.y_hat).data()
        );
    }

    #[test]
    fn masked_variable_values_cannot_influence_output() {
        let model = toy_model(4, 3, 2, 5);
        let mask = [true, false, true, true];
        let mut x1 = toy_input(4, 3);
        let y1 = {
            let p = model.forward(&x1, &mask, &streams()).unwrap();
            p.tape.value(p.y_hat).clone()
        };
        // rewrite every stored value of the masked variable (row 1)
        for t in 0..3 {
            let idx = 1 * 3 + t;
            x1.data_mut()[idx] = 1e6;
        }
        let y2 = {
            let p = model.forward(&x1, &mask, &streams()).unwrap();
            p.tape.value(p.y_hat).clone()
        };
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn all_variables_missing_propagates_interpolation_error() {
        let model = toy_model(3, 2, 1, 4);
        let x = toy_input(3, 2);
        let err = match model.forward(&x, &[false, false, false], &streams()) {
            Err(e) => e,
            Ok(_) => panic!("expected an error"),
        };
        assert_eq!(err.to_string(), "no observed variables to interpolate from");
    }

    #[test]
    fn permuting_variables_permutes_output() {
        // Deterministic mode (dropout masks are position-keyed, so they do
        // not commute with permutations). Row permutation reorders the
        // floating-point summation inside matrix products, so agreement is
        // to near machine precision rather than bitwise.
        let n = 4;
        let (h, l, d) = (3, 2, 4);
        let cfg = ModelConfig {
            n,
            h,
            l,
            c: 1,
            d,
            embed_dim: 4,
            p: 0.0,
            s: 1,
            ..ModelConfig::default()
        };
        let base = ForecastModel::new(cfg, AblationFlags::default(), toy_a_pre(n), 7).unwrap();
        let x = toy_input(n, h);
        let mask = [true, false, true, true];
        let perm = [2usize, 0, 3, 1]; // new position i takes old variable perm[i]

        let y_base = {
            let p = base.forward(&x, &mask, &streams()).unwrap();
            p.tape.value(p.y_hat).clone()
        };

        // permuted model: permute a_pre, every N-row parameter (embeddings),
        // the input rows, and the mask
        let mut permuted =
            ForecastModel::new(cfg, AblationFlags::default(), permute_sym(&base.a_pre, &perm), 7)
                .unwrap();
        let names: Vec<String> = base
            .store
            .iter()
            .map(|(_, name, _)| name.to_string())
            .collect();
        for name in names {
            let src = base.store.value(base.store.lookup(&name).unwrap()).clone();
            let dst_id = permuted.store.lookup(&name).unwrap();
            let moved = if name.ends_with("ia.embed") {
                permute_rows(&src, &perm)
            } else {
                src
            };
            permuted.store.set_value(dst_id, moved).unwrap();
        }
        let mut xp = Tensor::zeros(&[n, h, 1]);
        for i in 0..n {
            for t in 0..h {
                xp.data_mut()[i * h + t] = x.data()[perm[i] * h + t];
            }
        }
        let mask_p: Vec<bool> = (0..n).map(|i| mask[perm[i]]).collect();
        let y_perm = {
            let p = permuted.forward(&xp, &mask_p, &streams()).unwrap();
            p.tape.value(p.y_hat).clone()
        };
        for i in 0..n {
            for j in 0..l {
                let a = y_perm.get2(i, j);
                let b = y_base.get2(perm[i], j);
                assert!(
                    (a - b).abs() < 1e-9,
                    "row {i} col {j}: {a} vs {b}"
                );
            }
        }
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        let (n, d) = t.dims2().unwrap();
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] = t.get2(perm[i], j);
            }
        }
        out
    }

    fn permute_sym(t: &Tensor, perm: &[usize]) -> Tensor {
        let (n, _) = t.dims2().unwrap();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                out.data_mut()[i * n + j] = t.get2(perm[i], perm[j]);
            }
        }
        out
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let model = toy_model(4, 3, 2, 5);
        let x = toy_input(4, 3);
        let mask = [true, false, true, true];
        let mut pass = model.forward(&x, &mask, &streams()).unwrap();
        let y_true = pass.tape.constant(Tensor::full(&[4, 2], 0.5));
        let diff = pass.tape.sub(pass.y_hat, y_true).unwrap();
        let abs = pass.tape.abs(diff);
        let loss = pass.tape.mean(abs);
        let bound = pass.binder.bound_vars();
        let leaves: Vec<VarId> = bound.iter().map(|&(_, v)| v).collect();
        let grads = pass.tape.backward(loss, &leaves).unwrap();
        for (pid, var) in bound {
            let g = &grads[&var];
            let nonzero = g.data().iter().any(|&v| v != 0.0);
            assert!(
                nonzero,
                "parameter {} received an all-zero gradient",
                model.store.name(pid)
            );
        }
        // and every registered parameter was actually bound
        assert_eq!(pass.binder.bound_vars().len(), model.store.len());
    }

    #[test]
    fn uni_ablation_shrinks_widths_and_parameter_count() {
        let cfg = ModelConfig {
            n: 4,
            h: 3,
            l: 2,
            c: 1,
            d: 5,
            embed_dim: 4,
            p: 0.1,
            s: 3,
            ..ModelConfig::default()
        };
        let full =
            ForecastModel::new(cfg, AblationFlags::default(), toy_a_pre(4), 7).unwrap();
        let uni = ForecastModel::new(
            cfg,
            AblationFlags {
                bi_to_uni: true,
                ..AblationFlags::default()
            },
            toy_a_pre(4),
            7,
        )
        .unwrap();
        assert!(uni.store.numel() < full.store.numel());
        assert_eq!(uni.layer2.width, 5);
        assert_eq!(full.layer2.width, 10);
        let x = toy_input(4, 3);
        let p = uni.forward(&x, &[true; 4], &streams()).unwrap();
        assert_eq!(p.tape.shape(p.y_hat), [4, 2]);
    }

    #[test]
    fn adaptive_graph_ablation_runs_and_learns_embeddings() {
        let cfg = ModelConfig {
            n: 4,
            h: 2,
            l: 1,
            c: 1,
            d: 4,
            embed_dim: 4,
            p: 0.1,
            s: 2,
            ..ModelConfig::default()
        };
        let model = ForecastModel::new(
            cfg,
            AblationFlags {
                ggcn_to_agcn: true,
                ..AblationFlags::default()
            },
            toy_a_pre(4),
            7,
        )
        .unwrap();
        assert!(model.store.lookup("layer1.fwd.agcn.e1").is_some());
        let x = toy_input(4, 2);
        let mut pass = model.forward(&x, &[true, true, false, true], &streams()).unwrap();
        let y_true = pass.tape.constant(Tensor::zeros(&[4, 1]));
        let diff = pass.tape.sub(pass.y_hat, y_true).unwrap();
        let abs = pass.tape.abs(diff);
        let loss = pass.tape.mean(abs);
        let e1 = model.store.lookup("layer1.fwd.agcn.e1").unwrap();
        let bound = pass.binder.bound_vars();
        let e1_var = bound.iter().find(|&&(p, _)| p == e1).unwrap().1;
        let grads = pass.tape.backward(loss, &[e1_var]).unwrap();
        assert!(grads[&e1_var].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn tied_weights_halve_gate_parameters() {
        let cfg = ModelConfig {
            n: 3,
            h: 2,
            l: 1,
            c: 1,
            d: 4,
            embed_dim: 4,
            tie_ggcn_weights: true,
            ..ModelConfig::default()
        };
        let tied = ForecastModel::new(cfg, AblationFlags::default(), toy_a_pre(3), 7).unwrap();
        assert_eq!(tied.layer1_fwd.gates[0].w_pre, tied.layer1_fwd.gates[0].w_gau);
        assert!(tied.store.lookup("layer1.fwd.gate_f.w_gau").is_none());
        let x = toy_input(3, 2);
        let p = tied.forward(&x, &[true; 3], &streams()).unwrap();
        assert!(p.tape.value(p.y_hat).all_finite());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.n = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.p = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.s = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wrong_input_shape_names_both_shapes() {
        let model = toy_model(3, 2, 1, 4);
        let x = Tensor::zeros(&[3, 5, 1]);
        let err = match model.forward(&x, &[true; 3], &streams()) {
            Err(e) => e,
            Ok(_) => panic!("expected an error"),
        };
        let msg = err.to_string();
        assert!(msg.contains("[3, 5, 1]") && msg.contains("[3, 2, 1]"), "{msg}");
    }
}
