use serde::{Deserialize, Serialize};

use super::{check_dim, ModuleParams, NnError, ParamId, StoreId, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Affine map `W x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ModuleParams, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self, NnError> {
        let w = params.add_weight(&format!("{name}.w"), out_dim, in_dim)?;
        let b = if bias {
            Some(params.add_bias(&format!("{name}.b"), out_dim)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// Re-attaches to tensors already present in `params` (checkpoint load).
    pub fn attach(params: &ModuleParams, name: &str, bias: bool) -> Result<Self, NnError> {
        let w = params.id(&format!("{name}.w"))?;
        let t = params.get(w);
        let (out_dim, in_dim) = (t.rows(), t.cols());
        let b = if bias { Some(params.id(&format!("{name}.b"))?) } else { None };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, store: StoreId, x: Var) -> Result<Var, NnError> {
        check_dim("linear input", self.in_dim, tape.width(x))?;
        let y = tape.matvec(store, self.w, x)?;
        match self.b {
            Some(b) => {
                let bv = tape.param(store, b);
                tape.add(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Multi-layer perceptron: affine layers with `hidden` activation between
/// them and `output` activation at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new(params: &mut ModuleParams, name: &str, widths: &[usize], hidden: Activation, output: Activation) -> Result<Self, NnError> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], true))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { layers, hidden, output })
    }

    pub fn attach(params: &ModuleParams, name: &str, depth: usize, hidden: Activation, output: Activation) -> Result<Self, NnError> {
        let layers = (0..depth)
            .map(|i| Linear::attach(params, &format!("{name}.{i}"), true))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { layers, hidden, output })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, store: StoreId, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            let act = if i == last { self.output } else { self.hidden };
            h = act.apply(tape, h);
        }
        Ok(h)
    }

    /// Forward value only.
    pub fn apply(&self, params: &ModuleParams, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut tape = Tape::new();
        let s = tape.bind(params);
        let xv = tape.input(x.to_vec());
        let y = self.forward(&mut tape, s, xv)?;
        Ok(tape.value(y).to_vec())
    }
}

/// Gated recurrent cell:
///
/// ```text
/// z  = sigmoid(Wz x + Uz h + bz)
/// r  = sigmoid(Wr x + Ur h + br)
/// n  = tanh(Wn x + Un (r * h) + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    wz: Linear,
    uz: Linear,
    wr: Linear,
    ur: Linear,
    wn: Linear,
    un: Linear,
}

impl GruCell {
    pub fn new(params: &mut ModuleParams, name: &str, input: usize, hidden: usize) -> Result<Self, NnError> {
        Ok(Self {
            input,
            hidden,
            wz: Linear::new(params, &format!("{name}.wz"), input, hidden, true)?,
            uz: Linear::new(params, &format!("{name}.uz"), hidden, hidden, false)?,
            wr: Linear::new(params, &format!("{name}.wr"), input, hidden, true)?,
            ur: Linear::new(params, &format!("{name}.ur"), hidden, hidden, false)?,
            wn: Linear::new(params, &format!("{name}.wn"), input, hidden, true)?,
            un: Linear::new(params, &format!("{name}.un"), hidden, hidden, false)?,
        })
    }

    pub fn attach(params: &ModuleParams, name: &str) -> Result<Self, NnError> {
        let wz = Linear::attach(params, &format!("{name}.wz"), true)?;
        Ok(Self {
            input: wz.in_dim,
            hidden: wz.out_dim,
            wz,
            uz: Linear::attach(params, &format!("{name}.uz"), false)?,
            wr: Linear::attach(params, &format!("{name}.wr"), true)?,
            ur: Linear::attach(params, &format!("{name}.ur"), false)?,
            wn: Linear::attach(params, &format!("{name}.wn"), true)?,
            un: Linear::attach(params, &format!("{name}.un"), false)?,
        })
    }

    pub fn step(&self, tape: &mut Tape<'_>, store: StoreId, x: Var, h: Var) -> Result<Var, NnError> {
        check_dim("gru input", self.input, tape.width(x))?;
        check_dim("gru hidden", self.hidden, tape.width(h))?;
        let zx = self.wz.forward(tape, store, x)?;
        let zh = self.uz.forward(tape, store, h)?;
        let za = tape.add(zx, zh)?;
        let z = tape.sigmoid(za);

        let rx = self.wr.forward(tape, store, x)?;
        let rh = self.ur.forward(tape, store, h)?;
        let ra = tape.add(rx, rh)?;
        let r = tape.sigmoid(ra);

        let nx = self.wn.forward(tape, store, x)?;
        let rh = tape.mul(r, h)?;
        let nh = self.un.forward(tape, store, rh)?;
        let na = tape.add(nx, nh)?;
        let n = tape.tanh(na);

        let keep = tape.mul(z, h)?;
        let zc = tape.one_minus(z);
        let fresh = tape.mul(zc, n)?;
        tape.add(fresh, keep)
    }

    /// One update on plain vectors.
    pub fn step_values(&self, params: &ModuleParams, x: &[f64], h: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut tape = Tape::new();
        let s = tape.bind(params);
        let xv = tape.input(x.to_vec());
        let hv = tape.input(h.to_vec());
        let out = self.step(&mut tape, s, xv, hv)?;
        Ok(tape.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_all(p: &mut ModuleParams) {
        for t in p.tensors_mut() {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_weight_mlp_outputs_activation_of_bias() {
        let mut p = ModuleParams::new(0);
        let mlp = Mlp::new(&mut p, "m", &[3, 2], Activation::Tanh, Activation::Tanh).unwrap();
        zero_all(&mut p);
        p.by_name_mut("m.0.b").unwrap().values = vec![0.5, -1.0];
        let y = mlp.apply(&p, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.5f64.tanh(), (-1.0f64).tanh()]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut p = ModuleParams::new(0);
        let mlp = Mlp::new(&mut p, "m", &[3, 3], Activation::Identity, Activation::Identity).unwrap();
        p.by_name_mut("m.0.w").unwrap().values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(mlp.apply(&p, &[0.25, -3.0, 7.5]).unwrap(), vec![0.25, -3.0, 7.5]);
    }

    #[test]
    fn two_by_two_layer_matches_hand_arithmetic() {
        let mut p = ModuleParams::new(0);
        let mlp = Mlp::new(&mut p, "m", &[2, 2], Activation::Identity, Activation::Identity).unwrap();
        p.by_name_mut("m.0.w").unwrap().values = vec![0.3, -1.2, 2.5, 0.7];
        p.by_name_mut("m.0.b").unwrap().values = vec![0.1, -0.4];
        let x = [1.5, -0.25];
        let y = mlp.apply(&p, &x).unwrap();
        let y0 = 0.3 * 1.5 + -1.2 * -0.25 + 0.1;
        let y1 = 2.5 * 1.5 + 0.7 * -0.25 - 0.4;
        assert!((y[0] - y0).abs() < 1e-12);
        assert!((y[1] - y1).abs() < 1e-12);
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut p = ModuleParams::new(0);
        let mlp = Mlp::new(&mut p, "m", &[3, 2], Activation::Tanh, Activation::Identity).unwrap();
        assert!(matches!(mlp.apply(&p, &[1.0]), Err(NnError::Dimension { .. })));
    }

    #[test]
    fn zero_gru_halves_hidden() {
        let mut p = ModuleParams::new(0);
        let g = GruCell::new(&mut p, "g", 2, 3).unwrap();
        zero_all(&mut p);
        let h = [0.8, -0.4, 2.0];
        let out = g.step_values(&p, &[1.0, -1.0], &h).unwrap();
        for (o, hv) in out.iter().zip(h) {
            assert!((o - 0.5 * hv).abs() < 1e-15);
        }
        let out = g.step_values(&p, &[0.0, 0.0], &[0.0; 3]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn gru_matches_reference_gate_formulas() {
        let mut p = ModuleParams::new(11);
        let g = GruCell::new(&mut p, "g", 3, 2).unwrap();
        // give biases non-zero values too
        for name in ["g.wz.b", "g.wr.b", "g.wn.b"] {
            p.by_name_mut(name).unwrap().values = vec![0.2, -0.3];
        }
        let x = [0.5, -1.0, 0.25];
        let h = [0.1, -0.6];
        let got = g.step_values(&p, &x, &h).unwrap();

        let mv = |name: &str, v: &[f64]| -> Vec<f64> {
            let t = p.by_name(name).unwrap();
            (0..t.rows()).map(|r| t.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
        };
        let bias = |name: &str| p.by_name(name).unwrap().values.clone();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (wz, uz, bz) = (mv("g.wz.w", &x), mv("g.uz.w", &h), bias("g.wz.b"));
        let (wr, ur, br) = (mv("g.wr.w", &x), mv("g.ur.w", &h), bias("g.wr.b"));
        let z: Vec<f64> = (0..2).map(|i| sig(wz[i] + uz[i] + bz[i])).collect();
        let r: Vec<f64> = (0..2).map(|i| sig(wr[i] + ur[i] + br[i])).collect();
        let rh: Vec<f64> = (0..2).map(|i| r[i] * h[i]).collect();
        let (wn, un, bn) = (mv("g.wn.w", &x), mv("g.un.w", &rh), bias("g.wn.b"));
        for i in 0..2 {
            let n = (wn[i] + un[i] + bn[i]).tanh();
            let expect = (1.0 - z[i]) * n + z[i] * h[i];
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }
}
