//! Bidirectional LSTM encoder layer.
//!
//! Weights follow the usual cell equations with sigmoid gates and tanh
//! candidate/output activations. The two directions are fully independent
//! parameter sets; the layer output is the concatenation of the forward
//! pass's final hidden state and the backward pass's final hidden state.

use rand::Rng;

use super::{shape_mismatch, AutodiffError, Graph, NodeId, ParamTensors, Tensor};

/// One gate's weights: `w` on the step input, `u` on the recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Tensor, // [input_size, hidden]
    pub u: Tensor, // [hidden, hidden]
    pub b: Tensor, // [hidden]
}

impl GateParams {
    fn new(input_size: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (hidden as f64).sqrt();
        let mut t = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
            Tensor::new(shape, data).expect("shape/data agree").with_grad()
        };
        Self {
            w: t(vec![input_size, hidden]),
            u: t(vec![hidden, hidden]),
            b: t(vec![hidden]),
        }
    }

    fn zeros(input_size: usize, hidden: usize) -> Self {
        Self {
            w: Tensor::zeros(vec![input_size, hidden]).with_grad(),
            u: Tensor::zeros(vec![hidden, hidden]).with_grad(),
            b: Tensor::zeros(vec![hidden]).with_grad(),
        }
    }
}

/// Parameters for one direction: input, forget, cell, output gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    pub input: GateParams,
    pub forget: GateParams,
    pub cell: GateParams,
    pub output: GateParams,
}

impl LstmDirection {
    fn new(input_size: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: GateParams::new(input_size, hidden, rng),
            forget: GateParams::new(input_size, hidden, rng),
            cell: GateParams::new(input_size, hidden, rng),
            output: GateParams::new(input_size, hidden, rng),
        }
    }

    fn zeros(input_size: usize, hidden: usize) -> Self {
        Self {
            input: GateParams::zeros(input_size, hidden),
            forget: GateParams::zeros(input_size, hidden),
            cell: GateParams::zeros(input_size, hidden),
            output: GateParams::zeros(input_size, hidden),
        }
    }

    pub fn gates(&self) -> [&GateParams; 4] {
        [&self.input, &self.forget, &self.cell, &self.output]
    }

    pub fn gates_mut(&mut self) -> [&mut GateParams; 4] {
        [
            &mut self.input,
            &mut self.forget,
            &mut self.cell,
            &mut self.output,
        ]
    }
}

/// Bidirectional LSTM parameters: two independent directions.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub forward_dir: LstmDirection,
    pub backward_dir: LstmDirection,
}

impl LstmParams {
    pub fn new(input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        Self {
            input_size,
            hidden_size,
            forward_dir: LstmDirection::new(input_size, hidden_size, rng),
            backward_dir: LstmDirection::new(input_size, hidden_size, rng),
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_size,
            hidden_size,
            forward_dir: LstmDirection::zeros(input_size, hidden_size),
            backward_dir: LstmDirection::zeros(input_size, hidden_size),
        }
    }

    /// Output width of the bidirectional layer.
    pub fn output_size(&self) -> usize {
        2 * self.hidden_size
    }

    /// All parameter tensors in a stable order (forward gates, then backward).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(24);
        for dir in [&self.forward_dir, &self.backward_dir] {
            for gate in dir.gates() {
                out.push(&gate.w);
                out.push(&gate.u);
                out.push(&gate.b);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(24);
        for dir in [&mut self.forward_dir, &mut self.backward_dir] {
            for gate in dir.gates_mut() {
                let GateParams { w, u, b } = gate;
                out.push(w);
                out.push(u);
                out.push(b);
            }
        }
        out
    }

    /// Insert every parameter as a graph leaf, keeping id order aligned
    /// with [`LstmParams::tensors`].
    pub fn bind(&self, g: &mut Graph) -> BoundLstm {
        let mut bind_dir = |dir: &LstmDirection| BoundDirection {
            gates: dir.gates().map(|gate| BoundGate {
                w: g.leaf(&gate.w),
                u: g.leaf(&gate.u),
                b: g.leaf(&gate.b),
            }),
        };
        let fwd = bind_dir(&self.forward_dir);
        let bwd = bind_dir(&self.backward_dir);
        BoundLstm {
            fwd,
            bwd,
            input_size: self.input_size,
            hidden_size: self.hidden_size,
        }
    }
}

impl ParamTensors for LstmParams {
    fn param_tensors(&self) -> Vec<&Tensor> {
        self.tensors()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut()
    }
}

#[derive(Clone, Copy)]
pub struct BoundGate {
    w: NodeId,
    u: NodeId,
    b: NodeId,
}

#[derive(Clone, Copy)]
pub struct BoundDirection {
    gates: [BoundGate; 4],
}

/// Graph-resident handles to a bound [`LstmParams`].
#[derive(Clone, Copy)]
pub struct BoundLstm {
    fwd: BoundDirection,
    bwd: BoundDirection,
    input_size: usize,
    hidden_size: usize,
}

impl BoundLstm {
    /// Leaf ids in [`LstmParams::tensors`] order, for gradient extraction.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(24);
        for dir in [&self.fwd, &self.bwd] {
            for gate in &dir.gates {
                out.push(gate.w);
                out.push(gate.u);
                out.push(gate.b);
            }
        }
        out
    }

    /// Run the bidirectional layer over `steps[t]`, each a `[batch, input]`
    /// node, returning a `[batch, 2*hidden]` encoding.
    pub fn forward(&self, g: &mut Graph, steps: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if steps.is_empty() {
            return Err(AutodiffError::EmptySequence);
        }
        let (batch, input) = g.dims(steps[0]);
        if input != self.input_size {
            return Err(shape_mismatch(
                "lstm_forward",
                format!("step width {input}, expected {}", self.input_size),
            ));
        }
        let h_fwd = run_direction(g, &self.fwd, self.hidden_size, batch, steps.iter().copied())?;
        let h_bwd = run_direction(g, &self.bwd, self.hidden_size, batch, steps.iter().rev().copied())?;
        g.concat_cols(&[h_fwd, h_bwd])
    }
}

fn run_direction(
    g: &mut Graph,
    dir: &BoundDirection,
    hidden: usize,
    batch: usize,
    steps: impl Iterator<Item = NodeId>,
) -> Result<NodeId, AutodiffError> {
    let mut h = g.zeros(batch, hidden);
    let mut c = g.zeros(batch, hidden);
    for x in steps {
        let mut pre = [h; 4];
        for (slot, gate) in pre.iter_mut().zip(&dir.gates) {
            let xw = g.matmul(x, gate.w)?;
            let hu = g.matmul(h, gate.u)?;
            let sum = g.add(xw, hu)?;
            *slot = g.add_bias(sum, gate.b)?;
        }
        let i_gate = g.sigmoid(pre[0]);
        let f_gate = g.sigmoid(pre[1]);
        let cand = g.tanh(pre[2]);
        let o_gate = g.sigmoid(pre[3]);
        let keep = g.mul(f_gate, c)?;
        let write = g.mul(i_gate, cand)?;
        c = g.add(keep, write)?;
        let c_act = g.tanh(c);
        h = g.mul(o_gate, c_act)?;
    }
    Ok(h)
}

/// Encode one sequence (`[T, input]`, or `[T]` when the input is scalar)
/// and return the concatenated final hidden states as a `[2*hidden]` node.
pub fn forward_lstm_bidirectional(
    g: &mut Graph,
    params: &LstmParams,
    seq: &Tensor,
) -> Result<NodeId, AutodiffError> {
    let (t_len, width) = if params.input_size == 1 && seq.shape().len() == 1 {
        (seq.len(), 1)
    } else {
        seq.dims2()
    };
    if t_len == 0 {
        return Err(AutodiffError::EmptySequence);
    }
    if width != params.input_size {
        return Err(shape_mismatch(
            "forward_lstm_bidirectional",
            format!("sequence width {width}, expected {}", params.input_size),
        ));
    }
    let bound = params.bind(g);
    let steps: Vec<NodeId> = (0..t_len)
        .map(|t| g.constant(&seq.data()[t * width..(t + 1) * width]))
        .collect();
    bound.forward(g, &steps)
}
