//! Define-by-run tape over the dense kernels. Nodes hold forward values;
//! `backward` walks the tape in reverse, accumulating gradients for every
//! parameter referenced by a conv op. Multiple seeded outputs sum naturally
//! (the training loss seeds the prediction and every side output at once).

use super::kernels as k;
use super::tensor::Tensor;

pub type NodeId = usize;

/// Named, flat parameter block. Shape is [co, ci, k, k] for convs and [co]
/// for biases.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn out_channels(&self) -> usize {
        self.shape[0]
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    /// k in {1, 3}; w/b are parameter indices.
    Conv {
        k: usize,
        w: usize,
        b: usize,
    },
    Relu,
    Sigmoid,
    MaxPool2,
    Upsample {
        factor: usize,
    },
    AvgPool {
        factor: usize,
    },
    Concat,
    Add,
    /// inputs[0] = gate tensor (one channel per stream), inputs[1..] = streams.
    AttentionApply,
}

#[derive(Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    /// Argmax indices for MaxPool2, empty otherwise.
    aux: Vec<u32>,
}

#[derive(Debug, Default)]
pub struct Tape {
    pub nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, aux: Vec<u32>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, vec![], t, vec![])
    }

    pub fn conv(&mut self, params: &[Param], x: NodeId, w: usize, b: usize) -> NodeId {
        let wp = &params[w];
        let co = wp.out_channels();
        let kk = if wp.shape.len() == 4 { wp.shape[2] } else { 1 };
        let y = match kk {
            1 => k::conv1x1(self.value(x), &wp.data, &params[b].data, co),
            3 => k::conv3x3(self.value(x), &wp.data, &params[b].data, co),
            other => panic!("unsupported conv kernel {other}"),
        };
        self.push(Op::Conv { k: kk, w, b }, vec![x], y, vec![])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = k::relu(self.value(x));
        self.push(Op::Relu, vec![x], y, vec![])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = k::sigmoid(self.value(x));
        self.push(Op::Sigmoid, vec![x], y, vec![])
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let (y, idx) = k::maxpool2(self.value(x));
        self.push(Op::MaxPool2, vec![x], y, idx)
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        if factor == 1 {
            return x;
        }
        let y = k::upsample_bilinear(self.value(x), factor);
        self.push(Op::Upsample { factor }, vec![x], y, vec![])
    }

    pub fn avgpool(&mut self, x: NodeId, factor: usize) -> NodeId {
        if factor == 1 {
            return x;
        }
        let y = k::avgpool(self.value(x), factor);
        self.push(Op::AvgPool { factor }, vec![x], y, vec![])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let vals: Vec<&Tensor> = xs.iter().map(|&i| self.value(i)).collect();
        let y = k::concat_channels(&vals);
        self.push(Op::Concat, xs.to_vec(), y, vec![])
    }

    pub fn add(&mut self, xs: &[NodeId]) -> NodeId {
        let vals: Vec<&Tensor> = xs.iter().map(|&i| self.value(i)).collect();
        let y = k::add(&vals);
        self.push(Op::Add, xs.to_vec(), y, vec![])
    }

    pub fn attention(&mut self, gates: NodeId, streams: &[NodeId]) -> NodeId {
        let vals: Vec<&Tensor> = streams.iter().map(|&i| self.value(i)).collect();
        let y = k::attention_apply(self.value(gates), &vals);
        let mut inputs = vec![gates];
        inputs.extend_from_slice(streams);
        self.push(Op::AttentionApply, inputs, y, vec![])
    }

    /// Reverse sweep. `seeds` are (node, dL/d node) pairs; returns per-param
    /// gradient vectors aligned with `params`.
    pub fn backward(&self, params: &[Param], seeds: Vec<(NodeId, Tensor)>) -> Vec<Vec<f64>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        for (id, g) in seeds {
            accumulate(&mut grads[id], g);
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Conv { k: kk, w, b } => {
                    let x = self.value(node.inputs[0]);
                    let (dx, dw, db) = match kk {
                        1 => k::conv1x1_backward(x, &params[*w].data, &dy),
                        _ => k::conv3x3_backward(x, &params[*w].data, &dy),
                    };
                    axpy(&mut pgrads[*w], &dw);
                    axpy(&mut pgrads[*b], &db);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Relu => {
                    let dx = k::relu_backward(self.value(node.inputs[0]), &dy);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Sigmoid => {
                    let dx = k::sigmoid_backward(&node.value, &dy);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::MaxPool2 => {
                    let x = self.value(node.inputs[0]);
                    let dx = k::maxpool2_backward(&dy, &node.aux, (x.c, x.h, x.w));
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Upsample { factor } => {
                    let x = self.value(node.inputs[0]);
                    let dx = k::upsample_bilinear_backward(&dy, *factor, x.h, x.w);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::AvgPool { factor } => {
                    let dx = k::avgpool_backward(&dy, *factor);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Concat => {
                    let mut c0 = 0;
                    for &inp in &node.inputs {
                        let t = self.value(inp);
                        let hw = t.h * t.w;
                        let part = Tensor::from_vec(
                            t.c,
                            t.h,
                            t.w,
                            dy.data[c0 * hw..(c0 + t.c) * hw].to_vec(),
                        );
                        accumulate(&mut grads[inp], part);
                        c0 += t.c;
                    }
                }
                Op::Add => {
                    for &inp in &node.inputs {
                        accumulate(&mut grads[inp], dy.clone());
                    }
                }
                Op::AttentionApply => {
                    let gates = self.value(node.inputs[0]);
                    let streams: Vec<&Tensor> =
                        node.inputs[1..].iter().map(|&i| self.value(i)).collect();
                    let (da, dms) = k::attention_apply_backward(gates, &streams, &dy);
                    accumulate(&mut grads[node.inputs[0]], da);
                    for (inp, dm) in node.inputs[1..].iter().zip(dms) {
                        accumulate(&mut grads[*inp], dm);
                    }
                }
            }
        }
        pgrads
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(t) => {
            debug_assert_eq!(t.len(), g.len());
            for (a, b) in t.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
