//! Neural building blocks on top of the tape autodiff: parameter
//! registry, linear layers, attention, the transpose feed-forward layer,
//! the spatial-frequency attention block, and the selective-SSM layer.

pub mod attention;
pub mod mamba;
pub mod sab;
pub mod tffl;

use std::collections::HashMap;

use crate::tensor::{read_param_store, write_param_store, Tape, Tensor, TensorError, Var};

pub use attention::MhaParams;
pub use mamba::{
    ssm_convolutional, ssm_discretize, ssm_recurrent, MambaBlockParams, MambaLayerParams,
    ScanParams,
};
pub use sab::SabParams;
pub use tffl::TfflParams;

/// Handle to one named tensor inside a [`ModelParams`] registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat registry of named parameters; the order of registration is the
/// binding order on a tape.
#[derive(Debug, Default, Clone)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push((name.to_string(), t));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TensorError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_param_store(f, &self.entries)
    }

    /// Load values into an already-registered parameter set. Every
    /// registered name must be present with matching shape; extra names in
    /// the file are an error. Returns the number of tensors loaded.
    pub fn load(&mut self, path: &std::path::Path) -> Result<usize, TensorError> {
        let loaded = read_param_store(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in &loaded {
            let id = self.index.get(name).ok_or_else(|| {
                TensorError::Store(format!("unknown parameter {name} in store"))
            })?;
            if self.entries[*id].1.shape() != t.shape() {
                return Err(TensorError::Store(format!(
                    "shape mismatch for {name}: registered {:?}, stored {:?}",
                    self.entries[*id].1.shape(),
                    t.shape()
                )));
            }
            self.entries[*id].1 = t.clone();
            seen[*id] = true;
        }
        if let Some(pos) = seen.iter().position(|s| !s) {
            return Err(TensorError::Store(format!(
                "store is missing parameter {}",
                self.entries[pos].0
            )));
        }
        Ok(loaded.len())
    }
}

/// Per-tape leaves for every registered parameter, in registration order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn new(tape: &Tape, params: &ModelParams) -> Self {
        let vars = params.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every parameter after a backward pass; absent gradients
    /// (parameters not touched by the loss) come back as None.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Dense layer y = x W + b with W [in x out], b [1 x out].
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn new(
        params: &mut ModelParams,
        init: &mut crate::tensor::ParamInit,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        LinearParams {
            w: params.add(&format!("{name}.w"), init.uniform(&[d_in, d_out], d_in)),
            b: params.add(&format!("{name}.b"), init.zeros(&[1, d_out])),
        }
    }

    pub fn forward(&self, tape: &Tape, bind: &Binding, x: Var) -> Var {
        let y = tape.matmul(x, bind.var(self.w));
        tape.add_row_broadcast(y, bind.var(self.b))
    }
}

/// Layer-norm gain/bias pair over the trailing (column) axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(
        params: &mut ModelParams,
        init: &mut crate::tensor::ParamInit,
        name: &str,
        d: usize,
    ) -> Self {
        LayerNormParams {
            gain: params.add(&format!("{name}.gain"), init.ones(&[1, d])),
            bias: params.add(&format!("{name}.bias"), init.zeros(&[1, d])),
        }
    }

    pub fn forward(&self, tape: &Tape, bind: &Binding, x: Var) -> Var {
        tape.layer_norm(x, bind.var(self.gain), bind.var(self.bias), LN_EPS)
    }
}

/// Plain two-layer feed-forward block: ReLU(x W1 + b1) W2 + b2.
#[derive(Debug, Clone, Copy)]
pub struct FflParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
}

impl FflParams {
    pub fn new(
        params: &mut ModelParams,
        init: &mut crate::tensor::ParamInit,
        name: &str,
        d: usize,
        d_hidden: usize,
    ) -> Self {
        FflParams {
            l1: LinearParams::new(params, init, &format!("{name}.l1"), d, d_hidden),
            l2: LinearParams::new(params, init, &format!("{name}.l2"), d_hidden, d),
        }
    }

    pub fn forward(&self, tape: &Tape, bind: &Binding, x: Var) -> Var {
        let h = tape.relu(self.l1.forward(tape, bind, x));
        self.l2.forward(tape, bind, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamInit;

    #[test]
    fn registry_round_trip_and_audit() {
        let mut init = ParamInit::new(1);
        let mut p = ModelParams::new();
        let lin = LinearParams::new(&mut p, &mut init, "net.fc", 3, 2);
        let names: Vec<_> = p.names().map(str::to_string).collect();
        assert_eq!(names, vec!["net.fc.w", "net.fc.b"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fcsl");
        p.save(&path).unwrap();
        let mut q = ModelParams::new();
        let _ = LinearParams::new(&mut q, &mut init, "net.fc", 3, 2);
        assert_eq!(q.load(&path).unwrap(), 2);
        assert_eq!(q.get(lin.w).data(), p.get(lin.w).data());
        // missing parameter in the store is an audit error
        let mut extra = ModelParams::new();
        let _ = LinearParams::new(&mut extra, &mut init, "net.fc", 3, 2);
        let _ = extra.add("net.other", init.zeros(&[1, 1]));
        assert!(extra.load(&path).is_err());
        // shape mismatch is an audit error
        let mut bad = ModelParams::new();
        let _ = LinearParams::new(&mut bad, &mut init, "net.fc", 2, 2);
        assert!(bad.load(&path).is_err());
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut init = ParamInit::new(2);
        let mut p = ModelParams::new();
        let lin = LinearParams::new(&mut p, &mut init, "l", 2, 2);
        *p.get_mut(lin.w) = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        *p.get_mut(lin.b) = Tensor::matrix(1, 2, vec![0.5, -0.5]);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let y = lin.forward(&tape, &bind, x);
        assert_eq!(tape.value_cloned(y).data(), &[4.5, 5.5]);
    }
}
