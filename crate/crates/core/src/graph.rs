//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] is rebuilt for every forward pass: leaves are constants or
//! copies of [`ParamStore`] tensors, every primitive appends one op, and
//! `backward` replays the ops in reverse, accumulating gradients back into
//! the store. All buffers are dense row-major 2-D matrices (vectors are
//! 1×n, scalars 1×1).
//!
//! Gradient bookkeeping rules:
//! - a buffer needs a gradient iff any of its inputs does; frozen parameters
//!   and constants never do, so backward skips entire frozen subgraphs,
//! - gradients accumulate across backward calls until `zero_grad`,
//! - kernels are single-threaded unless `MQE_ALIGN_THREADS` raises the
//!   bound; the row-partitioned matmul is bit-identical at any thread count.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

struct Buf<T> {
    data: Vec<T>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    param: Option<ParamId>,
}

enum Op<T> {
    /// out = a @ b
    Matmul {
        a: Value,
        b: Value,
        out: Value,
    },
    /// out = a @ b^T
    MatmulTb {
        a: Value,
        b: Value,
        out: Value,
    },
    /// out = a + b (same shape)
    Add {
        a: Value,
        b: Value,
        out: Value,
    },
    /// out = a + bias (bias 1×n broadcast over rows)
    AddBias {
        a: Value,
        bias: Value,
        out: Value,
    },
    /// out = factor · a
    Scale {
        a: Value,
        factor: T,
        out: Value,
    },
    /// out = s · a where s is a 1×1 value on the tape
    ScaleBy {
        a: Value,
        s: Value,
        out: Value,
    },
    Gelu {
        a: Value,
        out: Value,
    },
    SoftmaxRows {
        a: Value,
        out: Value,
    },
    /// Softmax whose exponential sum runs in descending-value order, so the
    /// result is bit-identical under any permutation of the inputs (used by
    /// the expert router, whose outputs must be relabeling-equivariant).
    SoftmaxRowsCanonical {
        a: Value,
        out: Value,
    },
    /// Per-row normalization; cache holds (mean, rstd) per row.
    LayerNorm {
        x: Value,
        gain: Value,
        bias: Value,
        out: Value,
        cache: Vec<(T, T)>,
    },
    /// out[i] = table[ids[i]]
    Embed {
        table: Value,
        ids: Vec<usize>,
        out: Value,
    },
    ConcatRows {
        parts: Vec<Value>,
        out: Value,
    },
    ConcatCols {
        parts: Vec<Value>,
        out: Value,
    },
    /// out = a[:, start .. start+width]
    SliceCols {
        a: Value,
        start: usize,
        out: Value,
    },
    /// out = a[start .. start+rows, :]
    SliceRows {
        a: Value,
        start: usize,
        out: Value,
    },
    /// out (1×n) = column means of a
    MeanRows {
        a: Value,
        out: Value,
    },
    /// out (1×n) = column maxima of a; argmax cached for backward
    MaxRows {
        a: Value,
        argmax: Vec<usize>,
        out: Value,
    },
    /// out (1×1) = a[r][c]
    Pick {
        a: Value,
        r: usize,
        c: usize,
        out: Value,
    },
    /// out (1×1) = sum of all elements
    SumAll {
        a: Value,
        out: Value,
    },
    /// Mean negative log-likelihood over included rows; cache holds the
    /// softmax rows of included positions.
    MaskedCe {
        logits: Value,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        n_included: usize,
        out: Value,
    },
}

pub struct Tape<T: Real> {
    bufs: Vec<Buf<T>>,
    ops: Vec<Op<T>>,
    /// Param tensors that appeared as leaves on this tape (for grad-liveness).
    leaf_params: Vec<(ParamId, bool)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            leaf_params: Vec::new(),
        }
    }

    fn push_buf(
        &mut self,
        data: Vec<T>,
        rows: usize,
        cols: usize,
        needs_grad: bool,
        param: Option<ParamId>,
    ) -> Value {
        debug_assert_eq!(data.len(), rows * cols);
        self.bufs.push(Buf {
            data,
            rows,
            cols,
            needs_grad,
            param,
        });
        Value(self.bufs.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, data: Vec<T>, rows: usize, cols: usize) -> Result<Value> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "constant",
                format!("data len {} != {rows}x{cols}", data.len()),
            ));
        }
        Ok(self.push_buf(data, rows, cols, false, None))
    }

    pub fn scalar(&mut self, v: T) -> Value {
        self.push_buf(vec![v], 1, 1, false, None)
    }

    /// Leaf backed by a store tensor (copied in). Rank-1 tensors enter as
    /// 1×n rows; rank-2 as declared.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Value {
        let e = store.entry(id);
        let (rows, cols) = match e.decl.shape.len() {
            1 => (1, e.decl.shape[0]),
            2 => (e.decl.shape[0], e.decl.shape[1]),
            r => panic!("rank-{r} tensors are not representable on the tape"),
        };
        self.leaf_params.push((id, e.trainable));
        self.push_buf(e.data.clone(), rows, cols, e.trainable, Some(id))
    }

    /// Record a store tensor as covered by this tape without materializing
    /// it: backward will mark it gradient-populated (with zero
    /// contribution). Used for tensors a sparse path deliberately skips.
    pub fn register_leaf(&mut self, store: &ParamStore<T>, id: ParamId) {
        self.leaf_params.push((id, store.entry(id).trainable));
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        let b = &self.bufs[v.0];
        (b.rows, b.cols)
    }

    pub fn data(&self, v: Value) -> &[T] {
        &self.bufs[v.0].data
    }

    pub fn needs_grad(&self, v: Value) -> bool {
        self.bufs[v.0].needs_grad
    }

    fn grad_flag(&self, vs: &[Value]) -> bool {
        vs.iter().any(|v| self.bufs[v.0].needs_grad)
    }

    // ── primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![T::ZERO; m * n];
        mm_acc(
            &self.bufs[a.0].data,
            m,
            k,
            &self.bufs[b.0].data,
            n,
            &mut out,
        );
        let ng = self.grad_flag(&[a, b]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::Matmul { a, b, out: v });
        Ok(v)
    }

    /// a @ b^T, with b given row-major as n×k.
    pub fn matmul_tb(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_tb", format!("{m}x{k} @ ({n}x{k2})^T")));
        }
        let av = &self.bufs[a.0].data;
        let bv = &self.bufs[b.0].data;
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::ZERO;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        let ng = self.grad_flag(&[a, b]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::MatmulTb { a, b, out: v });
        Ok(v)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(Error::dim("add", format!("{m}x{n} vs {:?}", self.shape(b))));
        }
        let out: Vec<T> = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let ng = self.grad_flag(&[a, b]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::Add { a, b, out: v });
        Ok(v)
    }

    pub fn add_bias(&mut self, a: Value, bias: Value) -> Result<Value> {
        let (m, n) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != n {
            return Err(Error::dim(
                "add_bias",
                format!("bias {br}x{bc} against {m}x{n}"),
            ));
        }
        let mut out = self.bufs[a.0].data.clone();
        let bv = &self.bufs[bias.0].data;
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        let ng = self.grad_flag(&[a, bias]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::AddBias { a, bias, out: v });
        Ok(v)
    }

    pub fn scale(&mut self, a: Value, factor: T) -> Result<Value> {
        let (m, n) = self.shape(a);
        let out: Vec<T> = self.bufs[a.0].data.iter().map(|x| *x * factor).collect();
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::Scale { a, factor, out: v });
        Ok(v)
    }

    pub fn scale_by(&mut self, a: Value, s: Value) -> Result<Value> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim(
                "scale_by",
                format!("scale must be 1x1, got {:?}", self.shape(s)),
            ));
        }
        let (m, n) = self.shape(a);
        let sv = self.bufs[s.0].data[0];
        let out: Vec<T> = self.bufs[a.0].data.iter().map(|x| *x * sv).collect();
        let ng = self.grad_flag(&[a, s]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::ScaleBy { a, s, out: v });
        Ok(v)
    }

    pub fn gelu(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.shape(a);
        let out: Vec<T> = self.bufs[a.0].data.iter().map(|x| gelu_fwd(*x)).collect();
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::Gelu { a, out: v });
        Ok(v)
    }

    pub fn softmax_rows(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.shape(a);
        if n == 0 {
            return Err(Error::dim("softmax", "zero-width rows".to_string()));
        }
        let av = &self.bufs[a.0].data;
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            softmax_row(&av[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::SoftmaxRows { a, out: v });
        Ok(v)
    }

    /// Permutation-stable softmax: the reduction over each row visits
    /// entries in descending value order, so permuting a row's entries
    /// permutes the outputs bit-exactly.
    pub fn softmax_rows_canonical(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.shape(a);
        if n == 0 {
            return Err(Error::dim("softmax", "zero-width rows".to_string()));
        }
        let av = &self.bufs[a.0].data;
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|x, y| row[*y].partial_cmp(&row[*x]).unwrap().then(x.cmp(y)));
            let mx = row[order[0]];
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = T::ZERO;
            for j in &order {
                let e = (row[*j] - mx).exp();
                orow[*j] = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::SoftmaxRowsCanonical { a, out: v });
        Ok(v)
    }

    /// Per-row layer normalization with eps inside the square root; a
    /// constant row normalizes to zero before gain/bias.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value) -> Result<Value> {
        let (m, n) = self.shape(x);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} against {m}x{n}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::from_f64(LN_EPS);
        let xv = &self.bufs[x.0].data;
        let gv = &self.bufs[gain.0].data;
        let bv = &self.bufs[bias.0].data;
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::ZERO; m * n];
        let mut cache = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mean = T::ZERO;
            for v in row {
                mean += *v;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for v in row {
                let d = *v - mean;
                var += d * d;
            }
            var *= inv_n;
            let rstd = T::ONE / (var + eps).sqrt();
            cache.push((mean, rstd));
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                out[i * n + j] = xhat * gv[j] + bv[j];
            }
        }
        let ng = self.grad_flag(&[x, gain, bias]);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::LayerNorm {
            x,
            gain,
            bias,
            out: v,
            cache,
        });
        Ok(v)
    }

    pub fn embed(&mut self, table: Value, ids: &[usize]) -> Result<Value> {
        let (vocab, d) = self.shape(table);
        for (pos, id) in ids.iter().enumerate() {
            if *id >= vocab {
                return Err(Error::dim(
                    "embed",
                    format!("id {id} at position {pos} out of vocab {vocab}"),
                ));
            }
        }
        let tv = &self.bufs[table.0].data;
        let mut out = vec![T::ZERO; ids.len() * d];
        for (i, id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.grad_flag(&[table]);
        let v = self.push_buf(out, ids.len(), d, ng, None);
        self.ops.push(Op::Embed {
            table,
            ids: ids.to_vec(),
            out: v,
        });
        Ok(v)
    }

    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "empty part list".to_string()));
        }
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (pm, pn) = self.shape(*p);
            if pn != n {
                return Err(Error::dim("concat_rows", format!("width {pn} != {n}")));
            }
            rows += pm;
            out.extend_from_slice(&self.bufs[p.0].data);
        }
        let ng = self.grad_flag(parts);
        let v = self.push_buf(out, rows, n, ng, None);
        self.ops.push(Op::ConcatRows {
            parts: parts.to_vec(),
            out: v,
        });
        Ok(v)
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "empty part list".to_string()));
        }
        let (m, _) = self.shape(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p).1).collect();
        for p in parts {
            let (pm, _) = self.shape(*p);
            if pm != m {
                return Err(Error::dim("concat_cols", format!("rows {pm} != {m}")));
            }
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![T::ZERO; m * n];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let pv = &self.bufs[p.0].data;
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = self.grad_flag(parts);
        let v = self.push_buf(out, m, n, ng, None);
        self.ops.push(Op::ConcatCols {
            parts: parts.to_vec(),
            out: v,
        });
        Ok(v)
    }

    pub fn slice_cols(&mut self, a: Value, start: usize, width: usize) -> Result<Value> {
        let (m, n) = self.shape(a);
        if start + width > n {
            return Err(Error::dim(
                "slice_cols",
                format!("[{start}..{}] out of width {n}", start + width),
            ));
        }
        let av = &self.bufs[a.0].data;
        let mut out = vec![T::ZERO; m * width];
        for i in 0..m {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&av[i * n + start..i * n + start + width]);
        }
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(out, m, width, ng, None);
        self.ops.push(Op::SliceCols { a, start, out: v });
        Ok(v)
    }

    pub fn slice_rows(&mut self, a: Value, start: usize, rows: usize) -> Result<Value> {
        let (m, n) = self.shape(a);
        if start + rows > m {
            return Err(Error::dim(
                "slice_rows",
                format!("[{start}..{}] out of height {m}", start + rows),
            ));
        }
        let out = self.bufs[a.0].data[start * n..(start + rows) * n].to_vec();
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(out, rows, n, ng, None);
        self.ops.push(Op::SliceRows { a, start, out: v });
        Ok(v)
    }

    /// Leading rows of a logits matrix, as used by the next-token shift.
    pub fn slice_rows_for_loss(&mut self, a: Value, rows: usize) -> Result<Value> {
        self.slice_rows(a, 0, rows)
    }

    pub fn mean_rows(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.shape(a);
        if m == 0 {
            return Err(Error::dim("mean_rows", "zero rows".to_string()));
        }
        let av = &self.bufs[a.0].data;
        let inv = T::from_f64(1.0 / m as f64);
        let mut out = vec![T::ZERO; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += av[i * n + j];
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(out, 1, n, ng, None);
        self.ops.push(Op::MeanRows { a, out: v });
        Ok(v)
    }

    pub fn max_rows(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.shape(a);
        if m == 0 {
            return Err(Error::dim("max_rows", "zero rows".to_string()));
        }
        let av = &self.bufs[a.0].data;
        let mut out = vec![T::ZERO; n];
        let mut argmax = vec![0usize; n];
        for j in 0..n {
            let mut best = av[j];
            let mut bi = 0;
            for i in 1..m {
                if av[i * n + j] > best {
                    best = av[i * n + j];
                    bi = i;
                }
            }
            out[j] = best;
            argmax[j] = bi;
        }
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(out, 1, n, ng, None);
        self.ops.push(Op::MaxRows { a, argmax, out: v });
        Ok(v)
    }

    pub fn pick(&mut self, a: Value, r: usize, c: usize) -> Result<Value> {
        let (m, n) = self.shape(a);
        if r >= m || c >= n {
            return Err(Error::dim("pick", format!("({r},{c}) out of {m}x{n}")));
        }
        let val = self.bufs[a.0].data[r * n + c];
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(vec![val], 1, 1, ng, None);
        self.ops.push(Op::Pick { a, r, c, out: v });
        Ok(v)
    }

    pub fn sum_all(&mut self, a: Value) -> Result<Value> {
        let mut acc = T::ZERO;
        for v in &self.bufs[a.0].data {
            acc += *v;
        }
        let ng = self.grad_flag(&[a]);
        let v = self.push_buf(vec![acc], 1, 1, ng, None);
        self.ops.push(Op::SumAll { a, out: v });
        Ok(v)
    }

    /// Mean negative log-likelihood over the rows where `mask` is true;
    /// excluded rows contribute neither value nor gradient.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Value,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Value> {
        let (t, vocab) = self.shape(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(
                "cross_entropy_masked",
                format!(
                    "logits {t}x{vocab}, targets {}, mask {}",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let n_included = mask.iter().filter(|m| **m).count();
        if n_included == 0 {
            return Err(Error::Contract(
                "cross_entropy_masked: all positions excluded".to_string(),
            ));
        }
        let lv = &self.bufs[logits.0].data;
        let mut probs = vec![T::ZERO; t * vocab];
        let mut total = T::ZERO;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vocab {
                return Err(Error::dim(
                    "cross_entropy_masked",
                    format!("target {} at row {i} out of vocab {vocab}", targets[i]),
                ));
            }
            let row = &lv[i * vocab..(i + 1) * vocab];
            softmax_row(row, &mut probs[i * vocab..(i + 1) * vocab]);
            // -log p[target] computed stably from the shifted logits
            let mut mx = row[0];
            for v in row {
                if *v > mx {
                    mx = *v;
                }
            }
            let mut denom = T::ZERO;
            for v in row {
                denom += (*v - mx).exp();
            }
            total += denom.ln() - (row[targets[i]] - mx);
        }
        let mean = total * T::from_f64(1.0 / n_included as f64);
        let ng = self.grad_flag(&[logits]);
        let v = self.push_buf(vec![mean], 1, 1, ng, None);
        self.ops.push(Op::MaskedCe {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            n_included,
            out: v,
        });
        Ok(v)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss, accumulating into the store's
    /// gradients. Every trainable leaf on this tape is marked populated
    /// afterwards, whether or not the loss reached it.
    pub fn backward(&mut self, loss: Value, store: &mut ParamStore<T>) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.bufs.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }

        for (i, buf) in self.bufs.iter().enumerate() {
            if let Some(pid) = buf.param {
                if buf.needs_grad {
                    if let Some(g) = &grads[i] {
                        store.accumulate_grad(pid, g);
                    }
                }
            }
        }
        for (pid, trainable) in &self.leaf_params {
            if *trainable {
                store.touch_grad(*pid);
            }
        }
        Ok(())
    }

    fn backward_op(&self, op: &Op<T>, grads: &mut [Option<Vec<T>>]) {
        macro_rules! out_grad {
            ($out:expr) => {
                match grads[$out.0].take() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        macro_rules! ensure {
            ($v:expr) => {{
                let b = &self.bufs[$v.0];
                if grads[$v.0].is_none() {
                    grads[$v.0] = Some(vec![T::ZERO; b.rows * b.cols]);
                }
                grads[$v.0].as_mut().unwrap()
            }};
        }
        match op {
            Op::Matmul { a, b, out } => {
                let g = out_grad!(out);
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.bufs[a.0].needs_grad {
                    // dA += G @ B^T
                    let bv = &self.bufs[b.0].data;
                    let ga = ensure!(a);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::ZERO;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if self.bufs[b.0].needs_grad {
                    // dB += A^T @ G
                    let av = &self.bufs[a.0].data;
                    let gb = ensure!(b);
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == T::ZERO {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::MatmulTb { a, b, out } => {
                let g = out_grad!(out);
                let (m, k) = self.shape(*a);
                let (n, _) = self.shape(*b);
                if self.bufs[a.0].needs_grad {
                    // dA += G @ B
                    let bv = &self.bufs[b.0].data;
                    let ga = ensure!(a);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == T::ZERO {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                }
                if self.bufs[b.0].needs_grad {
                    // dB += G^T @ A
                    let av = &self.bufs[a.0].data;
                    let gb = ensure!(b);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == T::ZERO {
                                continue;
                            }
                            for p in 0..k {
                                gb[j * k + p] += gij * av[i * k + p];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, out } => {
                let g = out_grad!(out);
                for v in [a, b] {
                    if self.bufs[v.0].needs_grad {
                        let gv = ensure!(v);
                        for (d, s) in gv.iter_mut().zip(&g) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::AddBias { a, bias, out } => {
                let g = out_grad!(out);
                let (m, n) = self.shape(*a);
                if self.bufs[a.0].needs_grad {
                    let ga = ensure!(a);
                    for (d, s) in ga.iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
                if self.bufs[bias.0].needs_grad {
                    let gb = ensure!(bias);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Scale { a, factor, out } => {
                let g = out_grad!(out);
                if self.bufs[a.0].needs_grad {
                    let ga = ensure!(a);
                    for (d, s) in ga.iter_mut().zip(&g) {
                        *d += *s * *factor;
                    }
                }
            }
            Op::ScaleBy { a, s, out } => {
                let g = out_grad!(out);
                let sv = self.bufs[s.0].data[0];
                if self.bufs[a.0].needs_grad {
                    let ga = ensure!(a);
                    for (d, gs) in ga.iter_mut().zip(&g) {
                        *d += *gs * sv;
                    }
                }
                if self.bufs[s.0].needs_grad {
                    let av = &self.bufs[a.0].data;
                    let mut acc = T::ZERO;
                    for (gs, x) in g.iter().zip(av) {
                        acc += *gs * *x;
                    }
                    ensure!(s)[0] += acc;
                }
            }
            Op::Gelu { a, out } => {
                let g = out_grad!(out);
                if self.bufs[a.0].needs_grad {
                    let av = &self.bufs[a.0].data;
                    let ga = ensure!(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_bwd(av[i]);
                    }
                }
            }
            Op::SoftmaxRows { a, out } | Op::SoftmaxRowsCanonical { a, out } => {
                let g = out_grad!(out);
                if self.bufs[a.0].needs_grad {
                    let (m, n) = self.shape(*a);
                    let sv = &self.bufs[out.0].data;
                    let ga = ensure!(a);
                    for i in 0..m {
                        let srow = &sv[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mut dot = T::ZERO;
                        for j in 0..n {
                            dot += grow[j] * srow[j];
                        }
                        for j in 0..n {
                            ga[i * n + j] += srow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                out,
                cache,
            } => {
                let g = out_grad!(out);
                let (m, n) = self.shape(*x);
                let xv = &self.bufs[x.0].data;
                let gv = &self.bufs[gain.0].data;
                let inv_n = T::from_f64(1.0 / n as f64);
                if self.bufs[gain.0].needs_grad {
                    let gg = ensure!(gain);
                    for i in 0..m {
                        let (mean, rstd) = cache[i];
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mean) * rstd;
                            gg[j] += g[i * n + j] * xhat;
                        }
                    }
                }
                if self.bufs[bias.0].needs_grad {
                    let gb = ensure!(bias);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
                if self.bufs[x.0].needs_grad {
                    let gx = ensure!(x);
                    for i in 0..m {
                        let (mean, rstd) = cache[i];
                        // dxhat = g * gain; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut mean_dxhat = T::ZERO;
                        let mut mean_dxhat_xhat = T::ZERO;
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mean) * rstd;
                            let dxhat = g[i * n + j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat *= inv_n;
                        mean_dxhat_xhat *= inv_n;
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mean) * rstd;
                            let dxhat = g[i * n + j] * gv[j];
                            gx[i * n + j] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Embed { table, ids, out } => {
                let g = out_grad!(out);
                if self.bufs[table.0].needs_grad {
                    let (_, d) = self.shape(*table);
                    let gt = ensure!(table);
                    for (i, id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts, out } => {
                let g = out_grad!(out);
                let (_, n) = self.shape(*out);
                let mut off = 0;
                for p in parts {
                    let (pm, _) = self.shape(*p);
                    if self.bufs[p.0].needs_grad {
                        let gp = ensure!(p);
                        for (d, s) in gp.iter_mut().zip(&g[off * n..(off + pm) * n]) {
                            *d += *s;
                        }
                    }
                    off += pm;
                }
            }
            Op::ConcatCols { parts, out } => {
                let g = out_grad!(out);
                let (m, n) = self.shape(*out);
                let mut off = 0;
                for p in parts {
                    let (_, w) = self.shape(*p);
                    if self.bufs[p.0].needs_grad {
                        let gp = ensure!(p);
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start, out } => {
                let g = out_grad!(out);
                if self.bufs[a.0].needs_grad {
                    let (m, w) = self.shape(*out);
                    let (_, n) = self.shape(*a);
                    let ga = ensure!(a);
                    for i in 0..m {
                        for j in 0..w {
                            ga[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::SliceRows { a, start, out } => {
                let g = out_grad!(out);
                if self.bufs[a.0].needs_grad {
                    let (rows, n) = self.shape(*out);
                    let ga = ensure!(a);
                    for (d, s) in ga[start * n..(start + rows) * n].iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
            }
            Op::MeanRows { a, out } => {
                let g = out_grad!(out);
                if self.bufs[a.0].needs_grad {
                    let (m, n) = self.shape(*a);
                    let inv = T::from_f64(1.0 / m as f64);
                    let ga = ensure!(a);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::MaxRows { a, argmax, out } => {
                let g = out_grad!(out);
                if self.bufs[a.0].needs_grad {
                    let (_, n) = self.shape(*a);
                    let ga = ensure!(a);
                    for (j, am) in argmax.iter().enumerate() {
                        ga[am * n + j] += g[j];
                    }
                }
            }
            Op::Pick { a, r, c, out } => {
                let g = out_grad!(out);
                if self.bufs[a.0].needs_grad {
                    let (_, n) = self.shape(*a);
                    ensure!(a)[r * n + c] += g[0];
                }
            }
            Op::SumAll { a, out } => {
                let g = out_grad!(out);
                if self.bufs[a.0].needs_grad {
                    let ga = ensure!(a);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MaskedCe {
                logits,
                targets,
                mask,
                probs,
                n_included,
                out,
            } => {
                let g = out_grad!(out)[0];
                if self.bufs[logits.0].needs_grad {
                    let (t, vocab) = self.shape(*logits);
                    let scale = g * T::from_f64(1.0 / *n_included as f64);
                    let gl = ensure!(logits);
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..vocab {
                            let indicator = if j == targets[i] { T::ONE } else { T::ZERO };
                            gl[i * vocab + j] += scale * (probs[i * vocab + j] - indicator);
                        }
                    }
                }
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let mut mx = row[0];
    for v in row {
        if *v > mx {
            mx = *v;
        }
    }
    let mut sum = T::ZERO;
    for (o, v) in out.iter_mut().zip(row) {
        let e = (*v - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = T::ONE / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

// tanh-form gelu; exact at zero, differentiable everywhere
fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_bwd<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three_k = T::from_f64(3.0 * 0.044_715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let sech2 = T::ONE - th * th;
    half * (T::ONE + th) + half * x * sech2 * c * (T::ONE + three_k * x * x)
}

/// Thread bound for the row-partitioned matmul; defaults to 1 (fully
/// deterministic is the default, and row partitioning keeps any bound
/// bit-identical anyway).
pub fn kernel_threads() -> usize {
    std::env::var("MQE_ALIGN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(1)
}

/// out += a @ b, a: m×k, b: k×n. Row-partitioned when threading is enabled;
/// each output row is produced by exactly one thread in the same order as
/// the serial loop, so results are bit-identical at any thread count.
fn mm_acc<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    let threads = kernel_threads().min(m.max(1));
    if threads <= 1 || m * k * n < 1 << 16 {
        mm_rows(a, k, b, n, out, 0, m);
        return;
    }
    #[cfg(not(target_arch = "wasm32"))]
    {
        let chunk = m.div_ceil(threads);
        let slots: Vec<&mut [T]> = out.chunks_mut(chunk * n).collect();
        std::thread::scope(|scope| {
            for (t, slot) in slots.into_iter().enumerate() {
                let lo = t * chunk;
                let hi = (lo + chunk).min(m);
                scope.spawn(move || {
                    mm_rows(a, k, b, n, slot, lo, hi);
                });
            }
        });
    }
    #[cfg(target_arch = "wasm32")]
    mm_rows(a, k, b, n, out, 0, m);
}

fn mm_rows<T: Real>(a: &[T], k: usize, b: &[T], n: usize, out: &mut [T], lo: usize, hi: usize) {
    for i in lo..hi {
        let orow = &mut out[(i - lo) * n..(i - lo + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * *bv;
            }
        }
    }
}
