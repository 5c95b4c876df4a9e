//! Single-layer LSTM scorer. State starts at zero for every sequence and
//! the score is a linear readout of the final hidden state.

use super::{init_uniform, Graph, Linear, ParamId, ParamSet, Var};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct LstmScorer {
    input_dim: usize,
    hidden: usize,
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    pub head: Linear,
}

impl LstmScorer {
    /// Gate columns are ordered input, forget, candidate, output.
    pub fn new(params: &mut ParamSet, input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let wx = params.add("lstm.wx", init_uniform(rng, input_dim, 4 * hidden, hidden));
        let wh = params.add("lstm.wh", init_uniform(rng, hidden, 4 * hidden, hidden));
        let b = params.add("lstm.b", init_uniform(rng, 1, 4 * hidden, hidden));
        let head = Linear::new(params, "lstm.head", hidden, 1, rng);
        LstmScorer { input_dim, hidden, wx, wh, b, head }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// One step; `state = None` is the zero state.
    pub fn cell(&self, g: &mut Graph, x: Var, state: Option<(Var, Var)>) -> (Var, Var) {
        let xw = self.project(g, x);
        self.cell_projected(g, xw, state)
    }

    /// `x·W_x`, the input half of the gate pre-activations.
    pub fn project(&self, g: &mut Graph, x: Var) -> Var {
        assert_eq!(g.value(x).cols(), self.input_dim, "lstm input width");
        let wx = g.param(self.wx);
        g.matmul(x, wx)
    }

    /// One step from already projected inputs.
    pub fn cell_projected(&self, g: &mut Graph, xw: Var, state: Option<(Var, Var)>) -> (Var, Var) {
        let h = self.hidden;
        let b = g.param(self.b);
        let mut z = xw;
        if let Some((hp, _)) = state {
            let wh = g.param(self.wh);
            let r = g.matmul(hp, wh);
            z = g.add(z, r);
        }
        let z = g.add_row(z, b);
        let zi = g.slice_cols(z, 0..h);
        let zf = g.slice_cols(z, h..2 * h);
        let zg = g.slice_cols(z, 2 * h..3 * h);
        let zo = g.slice_cols(z, 3 * h..4 * h);
        let i = g.sigmoid(zi);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let mut c = g.mul(i, cand);
        if let Some((_, cp)) = state {
            let f = g.sigmoid(zf);
            let keep = g.mul(f, cp);
            c = g.add(keep, c);
        }
        let tc = g.tanh(c);
        (g.mul(o, tc), c)
    }

    /// Final `(h, c)` after feeding `steps` (each `sequences × input_dim`).
    pub fn encode(&self, g: &mut Graph, steps: &[Var]) -> (Var, Var) {
        assert!(!steps.is_empty(), "empty sequence");
        let mut state = None;
        for &x in steps {
            state = Some(self.cell(g, x, state));
        }
        state.expect("at least one step")
    }

    /// Like [`encode`](Self::encode) where step `t` consists of the rows
    /// `steps[t]` of the table `inputs`. Each table row is projected once.
    pub fn encode_indexed(&self, g: &mut Graph, inputs: Var, steps: &[Vec<usize>]) -> (Var, Var) {
        assert!(!steps.is_empty(), "empty sequence");
        let proj = self.project(g, inputs);
        let mut state = None;
        for idx in steps {
            let xw = g.gather_rows(proj, idx.clone());
            state = Some(self.cell_projected(g, xw, state));
        }
        state.expect("at least one step")
    }

    /// [`score_candidates`](Self::score_candidates) over rows of a table:
    /// `context[t][p]` and `candidates[p·group + k]` index into `inputs`.
    pub fn score_candidates_indexed(
        &self,
        g: &mut Graph,
        inputs: Var,
        context: &[Vec<usize>],
        candidates: &[usize],
        group: usize,
    ) -> Var {
        let proj = self.project(g, inputs);
        let mut state = None;
        for idx in context {
            let xw = g.gather_rows(proj, idx.clone());
            state = Some(self.cell_projected(g, xw, state));
        }
        let (h, c) = state.expect("non-empty context");
        let problems = g.value(h).rows();
        assert_eq!(candidates.len(), problems * group, "candidate rows");
        let idx: Vec<usize> = (0..problems).flat_map(|p| std::iter::repeat_n(p, group)).collect();
        let he = g.gather_rows(h, idx.clone());
        let ce = g.gather_rows(c, idx);
        let xw = g.gather_rows(proj, candidates.to_vec());
        let (hf, _) = self.cell_projected(g, xw, Some((he, ce)));
        self.head.forward(g, hf)
    }

    pub fn score_sequences(&self, g: &mut Graph, steps: &[Var]) -> Var {
        let (h, _) = self.encode(g, steps);
        self.head.forward(g, h)
    }

    /// Scores `group` candidates per problem that share a context prefix.
    /// `context` steps have one row per problem; `candidates` has
    /// `problems·group` rows, candidate-minor. Equal to running every
    /// candidate sequence in full, since the prefix state is identical.
    pub fn score_candidates(&self, g: &mut Graph, context: &[Var], candidates: Var, group: usize) -> Var {
        let (h, c) = self.encode(g, context);
        let problems = g.value(h).rows();
        assert_eq!(g.value(candidates).rows(), problems * group, "candidate rows");
        let idx: Vec<usize> = (0..problems).flat_map(|p| std::iter::repeat_n(p, group)).collect();
        let he = g.gather_rows(h, idx.clone());
        let ce = g.gather_rows(c, idx);
        let (hf, _) = self.cell(g, candidates, Some((he, ce)));
        self.head.forward(g, hf)
    }
}
