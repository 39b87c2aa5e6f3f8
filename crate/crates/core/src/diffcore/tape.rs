//! Matrix-level reverse-mode tape.
//!
//! Every node on a [`GradTape`] is either a leaf (parameter or constant)
//! or the output of a [`Function`] applied to earlier nodes. Values are
//! computed eagerly on [`GradTape::apply`]; [`GradTape::backward`] walks the
//! nodes in reverse and accumulates vector-Jacobian products.
//!
//! Layers outside this module plug in their own differentiable operations
//! by implementing [`Function`].

use std::rc::Rc;

use crate::error::{Error, Result};

use super::matrix::{dot, norm, Matrix};
use super::prims::{gelu, gelu_grad, COSINE_EPS};

/// A differentiable operation over matrices.
pub trait Function {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix>;

    /// Vector-Jacobian product: given `d loss / d output`, return
    /// `d loss / d input` for every input, in order.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>>;
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Matrix,
    op: Option<(Rc<dyn Function>, Vec<Var>)>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, None, true)
    }

    /// Leaf that is treated as data.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, None, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn apply<F: Function + 'static>(&mut self, f: F, inputs: &[Var]) -> Result<Var> {
        self.apply_rc(Rc::new(f), inputs)
    }

    pub fn apply_rc(&mut self, f: Rc<dyn Function>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let args: Vec<&Matrix> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            f.forward(&args)?
        };
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, Some((f, inputs.to_vec())), needs_grad))
    }

    fn push(&mut self, value: Matrix, op: Option<(Rc<dyn Function>, Vec<Var>)>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Recomputes every node from the leaves in recording order.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                None => node.value.clone(),
                Some((f, inputs)) => {
                    let args: Vec<&Matrix> = inputs.iter().map(|v| &values[v.0]).collect();
                    f.forward(&args)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradients of the scalar node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from a {}x{} node",
                out.rows(),
                out.cols()
            )));
        }
        self.backward_with(output, Matrix::scalar(1.0))
    }

    /// Backward pass seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some((f, inputs)) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let args: Vec<&Matrix> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = f.backward(&args, &node.value, &g)?;
            debug_assert_eq!(input_grads.len(), inputs.len(), "{}", f.name());
            for (v, ig) in inputs.iter().zip(input_grads) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep the gradient of intermediate nodes available to callers
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMulT, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Add, &[a, b])
    }

    /// `a + table[offset .. offset + a.rows]`.
    pub fn add_rows_from(&mut self, a: Var, table: Var, offset: usize) -> Result<Var> {
        self.apply(AddRowsFrom { offset }, &[a, table])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Gelu, &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(MeanRows, &[a])
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(VStack, parts)
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(SelectRows { rows }, &[a])
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(NormalizeRows, &[a])
    }

    /// Assembles `rows × cols` scalar nodes (row-major) into one matrix.
    pub fn grid(&mut self, cells: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if cells.len() != rows * cols {
            return Err(Error::Shape(format!("{} cells for a {rows}x{cols} grid", cells.len())));
        }
        self.apply(Grid { rows, cols }, cells)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(SumScalars, parts)
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

struct MatMul;

impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        x[0].matmul(x[1])
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![g.matmul_t(x[1])?, x[0].t_matmul(g)?])
    }
}

/// `a · bᵀ`
struct MatMulT;

impl Function for MatMulT {
    fn name(&self) -> &'static str {
        "matmul_t"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        x[0].matmul_t(x[1])
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![g.matmul(x[1])?, g.t_matmul(x[0])?])
    }
}

struct Add;

impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        x[0].add(x[1])
    }

    fn backward(&self, _x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![g.clone(), g.clone()])
    }
}

struct AddRowsFrom {
    offset: usize,
}

impl Function for AddRowsFrom {
    fn name(&self) -> &'static str {
        "add_rows_from"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        x[0].add(&x[1].slice_rows(self.offset, x[0].rows())?)
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let mut gt = Matrix::zeros(x[1].rows(), x[1].cols());
        for i in 0..g.rows() {
            gt.row_mut(self.offset + i).copy_from_slice(g.row(i));
        }
        Ok(vec![g.clone(), gt])
    }
}

struct Gelu;

impl Function for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        Ok(x[0].map(gelu))
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let mut gx = x[0].map(gelu_grad);
        for (a, b) in gx.data_mut().iter_mut().zip(g.data()) {
            *a *= b;
        }
        Ok(vec![gx])
    }
}

struct MeanRows;

impl Function for MeanRows {
    fn name(&self) -> &'static str {
        "mean_rows"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        x[0].mean_rows()
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let n = x[0].rows();
        let row: Vec<f64> = g.row(0).iter().map(|v| v / n as f64).collect();
        let mut gx = Matrix::zeros(n, x[0].cols());
        for i in 0..n {
            gx.row_mut(i).copy_from_slice(&row);
        }
        Ok(vec![gx])
    }
}

struct VStack;

impl Function for VStack {
    fn name(&self) -> &'static str {
        "vstack"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        Matrix::vstack(x)
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let mut start = 0;
        x.iter()
            .map(|m| {
                let part = g.slice_rows(start, m.rows());
                start += m.rows();
                part
            })
            .collect()
    }
}

struct SelectRows {
    rows: Vec<usize>,
}

impl Function for SelectRows {
    fn name(&self) -> &'static str {
        "select_rows"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        x[0].select_rows(&self.rows)
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let mut gx = Matrix::zeros(x[0].rows(), x[0].cols());
        for (k, &i) in self.rows.iter().enumerate() {
            for (a, b) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                *a += b;
            }
        }
        Ok(vec![gx])
    }
}

/// Each row divided by `max(‖row‖, ε)`.
struct NormalizeRows;

impl Function for NormalizeRows {
    fn name(&self) -> &'static str {
        "normalize_rows"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        let mut out = x[0].clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            let n = norm(r).max(COSINE_EPS);
            r.iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }

    fn backward(&self, x: &[&Matrix], out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let mut gx = Matrix::zeros(x[0].rows(), x[0].cols());
        for i in 0..gx.rows() {
            let n = norm(x[0].row(i));
            let gi = g.row(i);
            let dst = gx.row_mut(i);
            if n > COSINE_EPS {
                // d(x/‖x‖) = (g − u·(u·g)) / ‖x‖
                let u = out.row(i);
                let ug = dot(u, gi);
                for ((d, &gv), &uv) in dst.iter_mut().zip(gi).zip(u) {
                    *d = (gv - uv * ug) / n;
                }
            } else {
                for (d, &gv) in dst.iter_mut().zip(gi) {
                    *d = gv / COSINE_EPS;
                }
            }
        }
        Ok(vec![gx])
    }
}

struct Grid {
    rows: usize,
    cols: usize,
}

impl Function for Grid {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        if x.iter().any(|m| m.shape() != (1, 1)) {
            return Err(Error::Shape("grid cells must be scalars".into()));
        }
        Matrix::from_vec(self.rows, self.cols, x.iter().map(|m| m.item()).collect())
    }

    fn backward(&self, _x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        Ok(g.data().iter().map(|&v| Matrix::scalar(v)).collect())
    }
}

struct SumScalars;

impl Function for SumScalars {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        Ok(Matrix::scalar(x.iter().map(|m| m.item()).sum()))
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        Ok(x.iter().map(|_| g.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // a small composite objective touching every builtin: sum of the
    // squares of normalize(gelu(A·B) + C·Dᵀ) rows, reduced via a grid
    fn objective(params: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
        let mut t = GradTape::new();
        let vars: Vec<Var> = params.iter().map(|m| t.param(m.clone())).collect();
        let ab = t.matmul(vars[0], vars[1])?;
        let h = t.gelu(ab)?;
        let cd = t.matmul_t(vars[2], vars[3])?;
        let s = t.add(h, cd)?;
        let pos = t.add_rows_from(s, vars[4], 1)?;
        let picked = t.select_rows(pos, vec![2, 0, 0])?;
        let stacked = t.vstack(&[picked, pos])?;
        let n = t.normalize_rows(stacked)?;
        let m = t.mean_rows(stacked)?;
        let w = Matrix::from_vec(1, 3, vec![0.3, -1.1, 0.7])?;
        let w = t.constant(w);
        let mn = t.matmul_t(m, w)?;
        let probe = t.constant(Matrix::from_vec(3, 1, vec![1.0, 2.0, -0.5])?);
        let cells = t.matmul(n, probe)?;
        let c0 = t.select_rows(cells, vec![0])?;
        let c1 = t.select_rows(cells, vec![3])?;
        let g = t.grid(&[c0, c1, mn, c0], 2, 2)?;
        let flat = t.mean_rows(g)?;
        let one = t.constant(Matrix::from_vec(1, 2, vec![1.0, 1.0])?);
        let out = t.matmul_t(flat, one)?;
        let out2 = t.sum(&[out, mn])?;
        let grads = t.backward(out2)?;
        let value = t.value(out2).item();
        Ok((value, vars.iter().zip(params).map(|(v, p)| grads.get_or_zeros(*v, p)).collect()))
    }

    fn random_params(seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            Matrix::gaussian(4, 5, 1.0, &mut rng),
            Matrix::gaussian(5, 3, 1.0, &mut rng),
            Matrix::gaussian(4, 2, 1.0, &mut rng),
            Matrix::gaussian(3, 2, 1.0, &mut rng),
            Matrix::gaussian(6, 3, 1.0, &mut rng),
        ]
    }

    /// `Σ W ⊙ op(inputs)` for a fixed random read-out `W`, with its
    /// gradient from a seeded backward pass.
    fn read_out<G>(op: &G, params: &[Matrix], readout_seed: u64) -> Result<(f64, Vec<Matrix>)>
    where
        G: Fn(&mut GradTape, &[Var]) -> Result<Var>,
    {
        let mut t = GradTape::new();
        let vars: Vec<Var> = params.iter().map(|m| t.param(m.clone())).collect();
        let out = op(&mut t, &vars)?;
        let (r, c) = t.value(out).shape();
        let w = Matrix::gaussian(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(readout_seed));
        let value = t.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let grads = t.backward_with(out, w)?;
        Ok((value, vars.iter().zip(params).map(|(v, p)| grads.get_or_zeros(*v, p)).collect()))
    }

    fn check_builtin<G>(name: &str, shapes: &[(usize, usize)], op: G)
    where
        G: Fn(&mut GradTape, &[Var]) -> Result<Var>,
    {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::gaussian(r, c, 1.0, &mut rng)).collect();
            let err = grad_check(|p: &[Matrix]| read_out(&op, p, seed + 7919), &params, 1e-5).unwrap();
            assert!(err < 1e-6, "{name} seed {seed}: {err:e}");
        }
    }

    #[test]
    fn each_builtin_passes_grad_check() {
        check_builtin("matmul", &[(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1]));
        check_builtin("matmul_t", &[(3, 4), (5, 4)], |t, v| t.matmul_t(v[0], v[1]));
        check_builtin("add", &[(3, 4), (3, 4)], |t, v| t.add(v[0], v[1]));
        check_builtin("add_rows_from", &[(3, 4), (6, 4)], |t, v| t.add_rows_from(v[0], v[1], 2));
        check_builtin("gelu", &[(4, 5)], |t, v| t.gelu(v[0]));
        check_builtin("mean_rows", &[(5, 3)], |t, v| t.mean_rows(v[0]));
        check_builtin("vstack", &[(2, 3), (1, 3), (3, 3)], |t, v| t.vstack(v));
        check_builtin("select_rows", &[(4, 3)], |t, v| t.select_rows(v[0], vec![3, 0, 3, 1]));
        check_builtin("normalize_rows", &[(4, 5)], |t, v| t.normalize_rows(v[0]));
        check_builtin("grid", &[(1, 1), (1, 1), (1, 1), (1, 1), (1, 1), (1, 1)], |t, v| t.grid(v, 2, 3));
        check_builtin("sum", &[(1, 1), (1, 1), (1, 1)], |t, v| t.sum(v));
    }

    #[test]
    fn composite_chain_passes_grad_check() {
        for seed in 0..100 {
            let params = random_params(seed);
            let err = grad_check(objective, &params, 1e-4).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let params = random_params(7);
        let mut t = GradTape::new();
        let a = t.param(params[0].clone());
        let b = t.param(params[1].clone());
        let ab = t.matmul(a, b).unwrap();
        let h = t.gelu(ab).unwrap();
        let n = t.normalize_rows(h).unwrap();
        let _ = t.mean_rows(n).unwrap();
        let replayed = t.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, t.value(Var(i)));
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = GradTape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let p = t.param(Matrix::scalar(3.0));
        let y = t.matmul(c, p).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut t = GradTape::new();
        let p = t.param(Matrix::zeros(2, 2));
        assert!(t.backward(p).is_err());
    }
}
