//! Relational memory core: a recurrent cell whose state is a small set of
//! memory slots. Each step appends the projected input as an extra slot,
//! lets the slots attend over memory-plus-input, refines the result with an
//! MLP, and blends it into the previous memory through input/forget gates.
//!
//! Memory is laid out `(B·slots)×slot_dim`, row `b·slots + s`.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Real, Var};
use crate::nn::{InitScheme, LayerNorm, Linear};

/// Bias added to the forget-gate pre-activation so fresh cells start by
/// remembering.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RmcShape {
    pub input_dim: usize,
    pub slots: usize,
    pub heads: usize,
    pub head_size: usize,
    pub noise_dim: usize,
    pub output_dim: usize,
}

impl RmcShape {
    pub fn slot_dim(&self) -> usize {
        self.heads * self.head_size
    }
}

#[derive(Debug, Clone)]
pub struct RelationalMemory {
    shape: RmcShape,
    noise_proj: Linear,
    slot_bias: ParamId,
    input_proj: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    norm1: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
    norm2: LayerNorm,
    gate_input: Linear,
    gate_memory: Linear,
    output: Linear,
}

impl RelationalMemory {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        shape: RmcShape,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let d = shape.slot_dim();
        let n = |part: &str| format!("{name}.{part}");
        RelationalMemory {
            noise_proj: Linear::new(store, &n("noise_proj"), shape.noise_dim, shape.slots * d, false, init, rng),
            slot_bias: store.init(n("slot_bias"), shape.slots, d, init.weight(), rng),
            input_proj: Linear::new(store, &n("input_proj"), shape.input_dim, d, true, init, rng),
            query: Linear::new(store, &n("attn.query"), d, d, true, init, rng),
            key: Linear::new(store, &n("attn.key"), d, d, true, init, rng),
            value: Linear::new(store, &n("attn.value"), d, d, true, init, rng),
            norm1: LayerNorm::new(store, &n("norm1"), d, rng),
            mlp_in: Linear::new(store, &n("mlp.in"), d, d, true, init, rng),
            mlp_out: Linear::new(store, &n("mlp.out"), d, d, true, init, rng),
            norm2: LayerNorm::new(store, &n("norm2"), d, rng),
            gate_input: Linear::new(store, &n("gate.input"), d, 2 * d, true, init, rng),
            gate_memory: Linear::new(store, &n("gate.memory"), d, 2 * d, false, init, rng),
            output: Linear::new(store, &n("output"), shape.slots * d, shape.output_dim, true, init, rng),
            shape,
        }
    }

    pub fn shape(&self) -> &RmcShape {
        &self.shape
    }

    /// The output-projection bias, `1×V`.
    pub fn output_bias(&self) -> ParamId {
        self.output.bias.expect("output layer has a bias")
    }

    pub fn output_weight(&self) -> ParamId {
        self.output.weight
    }

    pub fn slot_bias(&self) -> ParamId {
        self.slot_bias
    }

    /// Initial memory from noise `z` (`B×noise_dim`): a bias-free projection
    /// per slot plus a learned per-slot bias.
    pub fn init_state<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, z: Var) -> Var {
        let batch = g.shape(z).0;
        let (slots, d) = (self.shape.slots, self.shape.slot_dim());
        let proj = self.noise_proj.forward(g, store, z);
        let proj = g.reshape(proj, batch * slots, d);
        let bias = g.param(store, self.slot_bias);
        let index: Vec<usize> = (0..batch).flat_map(|_| 0..slots).collect();
        let bias = g.gather_rows(bias, &index);
        g.add(proj, bias)
    }

    /// One recurrent step. Returns the new memory and `B×V` logits.
    pub fn step<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, memory: Var, input: Var) -> (Var, Var) {
        let batch = g.shape(input).0;
        let (slots, heads) = (self.shape.slots, self.shape.heads);
        let d = self.shape.slot_dim();
        debug_assert_eq!(g.shape(memory), (batch * slots, d));

        let x = self.input_proj.forward(g, store, input);

        // [memory; input] per batch row: rows b·(slots+1) .. b·(slots+1)+slots.
        let stacked = g.concat_rows(&[memory, x]);
        let index: Vec<usize> = (0..batch)
            .flat_map(|b| (0..slots).map(move |s| b * slots + s).chain([batch * slots + b]))
            .collect();
        let mem_plus_input = g.gather_rows(stacked, &index);

        let q = self.query.forward(g, store, memory);
        let k = self.key.forward(g, store, mem_plus_input);
        let v = self.value.forward(g, store, mem_plus_input);
        let q = g.split_heads(q, batch, slots, heads);
        let k = g.split_heads(k, batch, slots + 1, heads);
        let v = g.split_heads(v, batch, slots + 1, heads);
        let groups = batch * heads;
        let scores = g.batched_matmul(q, k, groups, true);
        let scores = g.scale(scores, F::one() / F::of(self.shape.head_size as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let ctx = g.batched_matmul(attn, v, groups, false);
        let attended = g.merge_heads(ctx, batch, slots, heads);

        let res1 = g.add(memory, attended);
        let mem1 = self.norm1.forward(g, store, res1);
        let hidden = self.mlp_in.forward(g, store, mem1);
        let hidden = g.gelu(hidden);
        let mlp = self.mlp_out.forward(g, store, hidden);
        let res2 = g.add(mem1, mlp);
        let candidate = self.norm2.forward(g, store, res2);

        let gate_x = self.gate_input.forward(g, store, x);
        let per_slot: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, slots)).collect();
        let gate_x = g.gather_rows(gate_x, &per_slot);
        let mem_tanh = g.tanh(memory);
        let gate_m = self.gate_memory.forward(g, store, mem_tanh);
        let gates = g.add(gate_x, gate_m);
        let input_pre = g.slice_cols(gates, 0, d);
        let forget_pre = g.slice_cols(gates, d, d);
        let input_gate = g.sigmoid(input_pre);
        let forget_pre = g.affine(forget_pre, F::one(), F::of(FORGET_BIAS));
        let forget_gate = g.sigmoid(forget_pre);
        let next = gated_update(g, input_gate, forget_gate, candidate, memory);

        let flat = g.reshape(next, batch, slots * d);
        let logits = self.output.forward(g, store, flat);
        (next, logits)
    }
}

/// `input_gate ⊙ tanh(candidate) + forget_gate ⊙ previous`.
pub fn gated_update<F: Real>(g: &mut Graph<F>, input_gate: Var, forget_gate: Var, candidate: Var, previous: Var) -> Var {
    let squashed = g.tanh(candidate);
    let fresh = g.mul(input_gate, squashed);
    let kept = g.mul(forget_gate, previous);
    g.add(fresh, kept)
}
