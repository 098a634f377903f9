//! Named views over the tensors of a parameter struct.
//!
//! Every parameterized type exposes its tensors in a fixed order. That order
//! drives the optimizer state, gradient checks and checkpoint layout, and a
//! gradient value of the same type lines up slot-for-slot with its parameters.

use super::layers::{BatchNorm, Conv1d, Dense};
use super::matrix::Matrix;

#[derive(Debug)]
pub struct Slot<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    pub trainable: bool,
}

#[derive(Debug)]
pub struct SlotMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub trainable: bool,
}

pub trait Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>);

    fn slots(&self) -> Vec<Slot<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn slots_mut(&mut self) -> Vec<SlotMut<'_>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn trainable_count(&self) -> usize {
        self.slots().iter().filter(|s| s.trainable).map(|s| s.data.len()).sum()
    }

    /// Sets every slot to zero, producing a gradient accumulator.
    fn zero_all(&mut self) {
        for s in self.slots_mut() {
            s.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push_matrix<'a>(out: &mut Vec<Slot<'a>>, prefix: &str, name: &str, m: &'a Matrix, trainable: bool) {
    out.push(Slot {
        name: join(prefix, name),
        shape: vec![m.rows(), m.cols()],
        data: m.data(),
        trainable,
    });
}

pub(crate) fn push_matrix_mut<'a>(
    out: &mut Vec<SlotMut<'a>>,
    prefix: &str,
    name: &str,
    m: &'a mut Matrix,
    trainable: bool,
) {
    let shape = vec![m.rows(), m.cols()];
    out.push(SlotMut {
        name: join(prefix, name),
        shape,
        data: m.data_mut(),
        trainable,
    });
}

pub(crate) fn push_vec<'a>(out: &mut Vec<Slot<'a>>, prefix: &str, name: &str, v: &'a [f64], trainable: bool) {
    out.push(Slot {
        name: join(prefix, name),
        shape: vec![v.len()],
        data: v,
        trainable,
    });
}

pub(crate) fn push_vec_mut<'a>(
    out: &mut Vec<SlotMut<'a>>,
    prefix: &str,
    name: &str,
    v: &'a mut [f64],
    trainable: bool,
) {
    out.push(SlotMut {
        name: join(prefix, name),
        shape: vec![v.len()],
        data: v,
        trainable,
    });
}

impl Params for Dense {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        push_matrix(out, prefix, "weight", &self.weight, true);
        push_vec(out, prefix, "bias", &self.bias, true);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        push_matrix_mut(out, prefix, "weight", &mut self.weight, true);
        push_vec_mut(out, prefix, "bias", &mut self.bias, true);
    }
}

impl Params for Conv1d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        push_matrix(out, prefix, "kernels", &self.kernels, true);
        push_vec(out, prefix, "bias", &self.bias, true);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        push_matrix_mut(out, prefix, "kernels", &mut self.kernels, true);
        push_vec_mut(out, prefix, "bias", &mut self.bias, true);
    }
}

impl Params for BatchNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        push_vec(out, prefix, "gamma", &self.gamma, true);
        push_vec(out, prefix, "beta", &self.beta, true);
        push_vec(out, prefix, "running_mean", &self.running_mean, false);
        push_vec(out, prefix, "running_var", &self.running_var, false);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        push_vec_mut(out, prefix, "gamma", &mut self.gamma, true);
        push_vec_mut(out, prefix, "beta", &mut self.beta, true);
        push_vec_mut(out, prefix, "running_mean", &mut self.running_mean, false);
        push_vec_mut(out, prefix, "running_var", &mut self.running_var, false);
    }
}

impl<P: Params> Params for Vec<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        for (i, p) in self.iter().enumerate() {
            p.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

impl Params for Matrix {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        push_matrix(out, prefix, "value", self, true);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        push_matrix_mut(out, prefix, "value", self, true);
    }
}
