//! A small reverse-mode automatic differentiation tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its inputs. Loss heads that are simpler to
//! differentiate by hand return their gradient with respect to a node and
//! are fed back in as seeds via [`Graph::backward`].

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Upsample2(NodeId),
    AvgPool(NodeId, usize),
    GlobalAvgPool(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    MeanRows(NodeId),
    L2Normalize(NodeId),
    Row(NodeId, usize),
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One forward evaluation over a parameter snapshot.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// A parameter read as a constant: no gradient reaches it.
    pub fn frozen_param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.get(id).clone();
        self.push(value, Op::Constant)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (c, h, wd) = x.dims3()?;
        let (oc, ic, k) = match w.shape()[..] {
            [oc, ic, k, k2] if k == k2 => (oc, ic, k),
            _ => return Err(Error::Shape(format!("conv weight shape {:?}", w.shape()))),
        };
        if ic != c {
            return Err(Error::Shape(format!(
                "conv expects {ic} input channels, got {c}"
            )));
        }
        if b.shape() != [oc] {
            return Err(Error::Shape(format!("conv bias shape {:?}", b.shape())));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!("input {h}x{wd} smaller than kernel {k}")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; oc * oh * ow];
        let xd = x.data();
        let wdat = w.data();
        for o in 0..oc {
            let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            out_plane.fill(b.data()[o]);
            for i in 0..c {
                let in_plane = &xd[i * h * wd..(i + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((o * ic + i) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * wd..(iy as usize + 1) * wd];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            for (ox, ov) in out_row.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    *ov += wv * in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[oc, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.tanh()).collect();
        let value = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.push(value, Op::Tanh(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).clone().scaled(factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// Nearest-neighbour 2x upsampling of a (C,H,W) map.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (c, h, w) = v.dims3()?;
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        let od = out.data_mut();
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    od[(ch * 2 * h + y) * 2 * w + xx] = v.at3(ch, y / 2, xx / 2);
                }
            }
        }
        Ok(self.push(out, Op::Upsample2(x)))
    }

    /// Non-overlapping k x k average pooling.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (c, h, w) = v.dims3()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!("cannot pool {h}x{w} by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let inv = 1.0 / (k * k) as f64;
        let od = out.data_mut();
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    od[(ch * oh + y / k) * ow + xx / k] += v.at3(ch, y, xx) * inv;
                }
            }
        }
        Ok(self.push(out, Op::AvgPool(x, k)))
    }

    /// (C,H,W) -> (C)
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (c, h, w) = v.dims3()?;
        let hw = h * w;
        let data = v
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::from_vec(&[c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// `W x + b` with W of shape (out, in).
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (out_dim, in_dim) = match w.shape()[..] {
            [o, i] => (o, i),
            _ => return Err(Error::Shape(format!("linear weight shape {:?}", w.shape()))),
        };
        if x.shape() != [in_dim] {
            return Err(Error::Shape(format!(
                "linear expects input of length {in_dim}, got {:?}",
                x.shape()
            )));
        }
        if b.shape() != [out_dim] {
            return Err(Error::Shape(format!("linear bias shape {:?}", b.shape())));
        }
        let data = (0..out_dim)
            .map(|o| {
                let row = &w.data()[o * in_dim..(o + 1) * in_dim];
                b.data()[o] + row.iter().zip(x.data()).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        let value = Tensor::vector(data);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// (L,D) -> (D)
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (l, d) = match v.shape()[..] {
            [l, d] if l > 0 => (l, d),
            _ => return Err(Error::Shape(format!("mean_rows of {:?}", v.shape()))),
        };
        let mut data = vec![0.0; d];
        for row in v.data().chunks(d) {
            for (a, b) in data.iter_mut().zip(row) {
                *a += b;
            }
        }
        for a in &mut data {
            *a /= l as f64;
        }
        Ok(self.push(Tensor::vector(data), Op::MeanRows(x)))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Shape(format!("cannot normalize vector with norm {n}")));
        }
        let value = v.clone().scaled(1.0 / n);
        Ok(self.push(value, Op::L2Normalize(x)))
    }

    /// Slice `index` along the first axis.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(x);
        let shape = v.shape();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::Shape(format!("row {index} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = v.data()[index * inner..(index + 1) * inner].to_vec();
        let value = Tensor::from_vec(&shape[1..], data)?;
        Ok(self.push(value, Op::Row(x, index)))
    }

    /// Rows of a (V,D) table, stacked to (L,D).
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (v, d) = match t.shape()[..] {
            [v, d] => (v, d),
            _ => return Err(Error::Shape(format!("gather table {:?}", t.shape()))),
        };
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::Shape(format!("gather index {i} of {v} rows")));
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_vec(&[indices.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Reverse sweep from the given seed gradients; returns parameter
    /// gradients.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape(),
                    self.value(id).shape()
                )));
            }
            accumulate(&mut grads, id, g);
        }
        let mut out = Gradients::new(self.store.len());
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => out.accumulate(*pid, &g),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) =
                        conv2d_backward(self.value(*input), self.value(*weight), &g, *stride, *pad);
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), data)?);
                }
                Op::Tanh(x) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), data)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, f) => accumulate(&mut grads, *x, g.scaled(*f)),
                Op::Upsample2(x) => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    let gd = gx.data_mut();
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gd[(ch * h + y / 2) * w + xx / 2] += g.at3(ch, y, xx);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::AvgPool(x, k) => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let inv = 1.0 / (k * k) as f64;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    let gd = gx.data_mut();
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gd[(ch * h + y) * w + xx] = g.at3(ch, y / k, xx / k) * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let hw = h * w;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for (ch, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                        plane.fill(g.data()[ch] / hw as f64);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let xv = self.value(*input);
                    let wv = self.value(*weight);
                    let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                    let mut gx = vec![0.0; in_dim];
                    let mut gw = vec![0.0; out_dim * in_dim];
                    for o in 0..out_dim {
                        let go = g.data()[o];
                        let row = &wv.data()[o * in_dim..(o + 1) * in_dim];
                        let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            gx[i] += go * row[i];
                            grow[i] = go * xv.data()[i];
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::vector(gx));
                    accumulate(&mut grads, *weight, Tensor::from_vec(&[out_dim, in_dim], gw)?);
                    accumulate(&mut grads, *bias, g);
                }
                Op::MeanRows(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let (l, d) = (shape[0], shape[1]);
                    let mut gx = Vec::with_capacity(l * d);
                    for _ in 0..l {
                        gx.extend(g.data().iter().map(|v| v / l as f64));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&shape, gx)?);
                }
                Op::L2Normalize(x) => {
                    let n = self.value(*x).norm();
                    let y = &node.value;
                    let dot: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| (gi - yi * dot) / n)
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(y.shape(), data)?);
                }
                Op::Row(x, index) => {
                    let shape = self.value(*x).shape().to_vec();
                    let inner = g.len();
                    let mut gx = Tensor::zeros(&shape);
                    gx.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { table, indices } => {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    let mut gt = Tensor::zeros(&shape);
                    let gd = gt.data_mut();
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gd[i * d + j] += g.data()[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oc, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut gx = vec![0.0; c * h * wd];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; oc];
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();
    for o in 0..oc {
        let g_plane = &gd[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = g_plane.iter().sum();
        for i in 0..c {
            let in_plane = &xd[i * h * wd..(i + 1) * h * wd];
            let gx_plane = &mut gx[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * c + i) * k + ky) * k + kx;
                    let wv = wdat[widx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_off = iy as usize * wd;
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        for (ox, gv) in g_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                let p = row_off + ix as usize;
                                acc += gv * in_plane[p];
                                gx_plane[p] += gv * wv;
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), gx).expect("shape"),
        Tensor::from_vec(w.shape(), gw).expect("shape"),
        Tensor::vector(gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seed_all;

    /// Checks every parameter entry of `store` against central differences
    /// of `f`, which must rebuild the graph and return (loss, seeds).
    fn check_all<F>(store: &ParamStore, f: F)
    where
        F: Fn(&mut Graph<'_>) -> (NodeId, Tensor),
    {
        let loss_of = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let (out, weights) = f(&mut g);
            g.value(out)
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut g = Graph::new(store);
        let (out, weights) = f(&mut g);
        let grads = g.backward(vec![(out, weights)]).unwrap();
        let h = 1e-5;
        for id in store.ids() {
            for j in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[j] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[j] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |t| t.data()[j]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5,
                    "{} [{j}]: numeric {numeric} analytic {analytic}",
                    store.entry(id).name
                );
            }
        }
    }

    #[test]
    fn conv_relu_pool_chain_matches_finite_differences() {
        let mut rng = seed_all(3).rng("graph-test");
        let mut store = ParamStore::new();
        let w = store.add("detector.w", Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng));
        let b = store.add("detector.b", Tensor::randn(&[3], 0.1, &mut rng));
        let w2 = store.add("detector.w2", Tensor::randn(&[3, 3, 1, 1], 0.5, &mut rng));
        let b2 = store.add("detector.b2", Tensor::randn(&[3], 0.1, &mut rng));
        let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        let weights = Tensor::randn(&[3], 1.0, &mut rng);
        check_all(&store, |g| {
            let xi = g.constant(x.clone());
            let (wi, bi) = (g.param(w), g.param(b));
            let c = g.conv2d(xi, wi, bi, 2, 1).unwrap();
            let r = g.tanh(c);
            let up = g.upsample2(r).unwrap();
            let pooled = g.avg_pool(up, 2).unwrap();
            let s = g.add(pooled, r).unwrap();
            let (w2i, b2i) = (g.param(w2), g.param(b2));
            let c2 = g.conv2d(s, w2i, b2i, 1, 0).unwrap();
            let c2 = g.relu(c2);
            let gp = g.global_avg_pool(c2).unwrap();
            let out = g.l2_normalize(gp).unwrap();
            (out, weights.clone())
        });
    }

    #[test]
    fn gather_mean_linear_chain_matches_finite_differences() {
        let mut rng = seed_all(4).rng("graph-test");
        let mut store = ParamStore::new();
        let table = store.add("text_vocab", Tensor::randn(&[5, 4], 1.0, &mut rng));
        let bank = store.add("prompt_bank", Tensor::randn(&[2, 3, 4], 1.0, &mut rng));
        let w = store.add("text.w", Tensor::randn(&[6, 4], 0.5, &mut rng));
        let b = store.add("text.b", Tensor::randn(&[6], 0.1, &mut rng));
        let weights = Tensor::randn(&[6], 1.0, &mut rng);
        check_all(&store, |g| {
            let t = g.param(table);
            let toks = g.gather(t, &[1, 3, 1]).unwrap();
            let m1 = g.mean_rows(toks).unwrap();
            let bk = g.param(bank);
            let r = g.row(bk, 1).unwrap();
            let m2 = g.mean_rows(r).unwrap();
            let s = g.add(m1, m2).unwrap();
            let s = g.scale(s, 0.7);
            let (wi, bi) = (g.param(w), g.param(b));
            let l = g.linear(s, wi, bi).unwrap();
            let out = g.tanh(l);
            (out, weights.clone())
        });
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("text.w", Tensor::filled(&[2, 2], 1.0));
        let b = store.add("text.b", Tensor::zeros(&[2]));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let (wi, bi) = (g.frozen_param(w), g.param(b));
        let y = g.linear(x, wi, bi).unwrap();
        let grads = g.backward(vec![(y, Tensor::vector(vec![1.0, 1.0]))]).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut store = ParamStore::new();
        let w = store.add("detector.w", Tensor::zeros(&[1, 2, 3, 3]));
        let b = store.add("detector.b", Tensor::zeros(&[1]));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[3, 8, 8]));
        let (wi, bi) = (g.param(w), g.param(b));
        assert!(matches!(g.conv2d(x, wi, bi, 1, 1), Err(Error::Shape(_))));
    }
}
