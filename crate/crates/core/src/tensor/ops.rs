//! Elementwise, dense, and episode-structured ops.

use super::{Tape, Var};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

fn scalar_array(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.op(
            value,
            vec![
                (a, Box::new(|g: &ArrayD<f64>| g.clone())),
                (b, Box::new(|g: &ArrayD<f64>| g.clone())),
            ],
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.op(
            value,
            vec![
                (a, Box::new(|g: &ArrayD<f64>| g.clone())),
                (b, Box::new(|g: &ArrayD<f64>| -g)),
            ],
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let a_val = self.value_rc(a);
        let b_val = self.value_rc(b);
        let value = &*a_val * &*b_val;
        self.op(
            value,
            vec![
                (a, Box::new(move |g: &ArrayD<f64>| g * &*b_val)),
                (b, Box::new(move |g: &ArrayD<f64>| g * &*a_val)),
            ],
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.op(value, vec![(a, Box::new(move |g: &ArrayD<f64>| g * c))])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.op(value, vec![(a, Box::new(move |g: &ArrayD<f64>| g * &mask))])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let y = value.clone();
        self.op(
            value,
            vec![(a, Box::new(move |g: &ArrayD<f64>| g * &(&y * &y.mapv(|v| 1.0 - v))))],
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let y = value.clone();
        self.op(
            value,
            vec![(a, Box::new(move |g: &ArrayD<f64>| g * &y.mapv(|v| 1.0 - v * v)))],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).raw_dim();
        let value = scalar_array(self.value(a).sum());
        self.op(
            value,
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| {
                    ArrayD::from_elem(shape.clone(), g.iter().next().copied().unwrap())
                }),
            )],
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let shape = self.value(a).raw_dim();
        let value = scalar_array(self.value(a).sum() / n);
        self.op(
            value,
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| {
                    ArrayD::from_elem(shape.clone(), g.iter().next().copied().unwrap() / n)
                }),
            )],
        )
    }

    pub fn add_scalars(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let value = scalar_array(terms.iter().map(|&t| self.scalar(t)).sum());
        let parents = terms
            .iter()
            .map(|&t| {
                (
                    t,
                    Box::new(|g: &ArrayD<f64>| g.clone()) as Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>,
                )
            })
            .collect();
        self.op(value, parents)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig = self.value(a).raw_dim();
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        self.op(
            value,
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| {
                    g.clone()
                        .into_shape_with_order(orig.clone())
                        .expect("reshape backward")
                }),
            )],
        )
    }

    /// `x[N,K] . w[K,M]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let x_val = self.value_rc(x);
        let w_val = self.value_rc(w);
        let x2 = x_val.view().into_dimensionality::<Ix2>().unwrap();
        let w2 = w_val.view().into_dimensionality::<Ix2>().unwrap();
        let value = x2.dot(&w2).into_dyn();
        let xc = x_val.clone();
        let wc = w_val.clone();
        self.op(
            value,
            vec![
                (
                    x,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        let w2 = wc.view().into_dimensionality::<Ix2>().unwrap();
                        g2.dot(&w2.t()).into_dyn()
                    }),
                ),
                (
                    w,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        let x2 = xc.view().into_dimensionality::<Ix2>().unwrap();
                        x2.t().dot(&g2).into_dyn()
                    }),
                ),
            ],
        )
    }

    /// `x[N,M] + b[M]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let x2 = self.value(x).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let b1 = self.value(b).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let value = (&x2 + &b1).into_dyn();
        self.op(
            value,
            vec![
                (x, Box::new(|g: &ArrayD<f64>| g.clone())),
                (
                    b,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        g2.sum_axis(Axis(0)).into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Rows `[start, end)` of `x[N,D]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let x2 = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let (n, d) = x2.dim();
        assert!(start <= end && end <= n);
        let value = x2.slice(ndarray::s![start..end, ..]).to_owned().into_dyn();
        self.op(
            value,
            vec![(
                x,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut out = Array2::<f64>::zeros((n, d));
                    out.slice_mut(ndarray::s![start..end, ..]).assign(&g2);
                    out.into_dyn()
                }),
            )],
        )
    }

    /// `[a | b]` along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let a2 = self.value(a).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let b2 = self.value(b).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let da = a2.ncols();
        let db = b2.ncols();
        let value = ndarray::concatenate(Axis(1), &[a2.view(), b2.view()])
            .unwrap()
            .into_dyn();
        self.op(
            value,
            vec![
                (
                    a,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        g2.slice(ndarray::s![.., 0..da]).to_owned().into_dyn()
                    }),
                ),
                (
                    b,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        g2.slice(ndarray::s![.., da..da + db]).to_owned().into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Mean of the selected rows of `x[N,D]`.
    pub fn mean_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        assert!(!indices.is_empty());
        let x2 = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let (n, d) = x2.dim();
        let mut acc = Array1::<f64>::zeros(d);
        for &i in indices {
            acc += &x2.row(i);
        }
        acc /= indices.len() as f64;
        let idx = indices.to_vec();
        self.op(
            acc.into_dyn(),
            vec![(
                x,
                Box::new(move |g: &ArrayD<f64>| {
                    let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut out = Array2::<f64>::zeros((n, d));
                    let w = 1.0 / idx.len() as f64;
                    for &i in &idx {
                        out.row_mut(i).scaled_add(w, &g1);
                    }
                    out.into_dyn()
                }),
            )],
        )
    }

    /// Stack `[D]` vectors into `[n,D]`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let d = self.value(rows[0]).len();
        let mut value = Array2::<f64>::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            let rv = self.value(r).view().into_dimensionality::<Ix1>().unwrap();
            value.row_mut(i).assign(&rv);
        }
        let parents = rows
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                (
                    r,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        g2.row(i).to_owned().into_dyn()
                    }) as Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>,
                )
            })
            .collect();
        self.op(value.into_dyn(), parents)
    }

    /// Stack `[H,W,3]` images into a `[N,3,H,W]` batch.
    pub fn stack_images_chw(&mut self, images: &[Var]) -> Var {
        assert!(!images.is_empty());
        let first = self.value(images[0]);
        let (h, w, c) = first.view().into_dimensionality::<Ix3>().unwrap().dim();
        let mut value = ndarray::Array4::<f64>::zeros((images.len(), c, h, w));
        for (n, &img) in images.iter().enumerate() {
            let iv = self.value(img).view().into_dimensionality::<Ix3>().unwrap();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        value[[n, ch, y, x]] = iv[[y, x, ch]];
                    }
                }
            }
        }
        let parents = images
            .iter()
            .enumerate()
            .map(|(n, &img)| {
                (
                    img,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let (_, c, h, w) = g4.dim();
                        let mut out = ndarray::Array3::<f64>::zeros((h, w, c));
                        for ch in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    out[[y, x, ch]] = g4[[n, ch, y, x]];
                                }
                            }
                        }
                        out.into_dyn()
                    }) as Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>,
                )
            })
            .collect();
        self.op(value.into_dyn(), parents)
    }

    /// Spatial mean of `x[N,C,H,W]` down to `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x4.dim();
        let mut value = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                value[[i, ch]] = x4.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum()
                    / (h * w) as f64;
            }
        }
        self.op(
            value.into_dyn(),
            vec![(
                x,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    let scale = 1.0 / (h * w) as f64;
                    for i in 0..n {
                        for ch in 0..c {
                            out.index_axis_mut(Axis(0), i)
                                .index_axis_mut(Axis(0), ch)
                                .fill(g2[[i, ch]] * scale);
                        }
                    }
                    out.into_dyn()
                }),
            )],
        )
    }

    /// Expand a `[g,g]` grid to a `[H,W]` block-constant map with floor
    /// cell boundaries.
    pub fn expand_grid(&mut self, grid: Var, height: usize, width: usize) -> Var {
        let g2 = self.value(grid).view().into_dimensionality::<Ix2>().unwrap();
        let g = g2.nrows();
        assert_eq!(g, g2.ncols());
        let mut value = Array2::<f64>::zeros((height, width));
        for y in 0..height {
            for x in 0..width {
                let (ci, cj) = crate::fusion::grid_cell(g, height, width, y, x);
                value[[y, x]] = g2[[ci, cj]];
            }
        }
        self.op(
            value.into_dyn(),
            vec![(
                grid,
                Box::new(move |gr: &ArrayD<f64>| {
                    let gm = gr.view().into_dimensionality::<Ix2>().unwrap();
                    let mut out = Array2::<f64>::zeros((g, g));
                    for y in 0..height {
                        for x in 0..width {
                            let (ci, cj) = crate::fusion::grid_cell(g, height, width, y, x);
                            out[[ci, cj]] += gm[[y, x]];
                        }
                    }
                    out.into_dyn()
                }),
            )],
        )
    }

    /// `out = wmap (.) a + (1 - wmap) (.) b` with `a`, `b` in `[H,W,3]` and
    /// `wmap` in `[H,W]` shared across channels.
    pub fn fuse_hwc(&mut self, a: Var, b: Var, wmap: Var) -> Var {
        let a_val = self.value_rc(a);
        let b_val = self.value_rc(b);
        let w_val = self.value_rc(wmap);
        let a3 = a_val.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = b_val.view().into_dimensionality::<Ix3>().unwrap();
        let w2 = w_val.view().into_dimensionality::<Ix2>().unwrap();
        let (h, w, c) = a3.dim();
        let mut value = ndarray::Array3::<f64>::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                let m = w2[[y, x]];
                for ch in 0..c {
                    value[[y, x, ch]] = m * a3[[y, x, ch]] + (1.0 - m) * b3[[y, x, ch]];
                }
            }
        }
        let wa = w_val.clone();
        let wb = w_val.clone();
        let ac = a_val.clone();
        let bc = b_val.clone();
        self.op(
            value.into_dyn(),
            vec![
                (
                    a,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                        let w2 = wa.view().into_dimensionality::<Ix2>().unwrap();
                        let mut out = ndarray::Array3::<f64>::zeros(g3.dim());
                        for ((y, x, ch), o) in out.indexed_iter_mut() {
                            *o = g3[[y, x, ch]] * w2[[y, x]];
                        }
                        out.into_dyn()
                    }),
                ),
                (
                    b,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                        let w2 = wb.view().into_dimensionality::<Ix2>().unwrap();
                        let mut out = ndarray::Array3::<f64>::zeros(g3.dim());
                        for ((y, x, ch), o) in out.indexed_iter_mut() {
                            *o = g3[[y, x, ch]] * (1.0 - w2[[y, x]]);
                        }
                        out.into_dyn()
                    }),
                ),
                (
                    wmap,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                        let a3 = ac.view().into_dimensionality::<Ix3>().unwrap();
                        let b3 = bc.view().into_dimensionality::<Ix3>().unwrap();
                        let (h, w, c) = g3.dim();
                        let mut out = Array2::<f64>::zeros((h, w));
                        for y in 0..h {
                            for x in 0..w {
                                let mut acc = 0.0;
                                for ch in 0..c {
                                    acc += g3[[y, x, ch]] * (a3[[y, x, ch]] - b3[[y, x, ch]]);
                                }
                                out[[y, x]] = acc;
                            }
                        }
                        out.into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Mean absolute difference between two same-shaped nodes.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        let a_val = self.value_rc(a);
        let b_val = self.value_rc(b);
        assert_eq!(a_val.shape(), b_val.shape());
        let n = a_val.len() as f64;
        let loss = a_val
            .iter()
            .zip(b_val.iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / n;
        let sign: ArrayD<f64> = {
            let mut s = ArrayD::zeros(a_val.raw_dim());
            for ((sv, &x), &y) in s.iter_mut().zip(a_val.iter()).zip(b_val.iter()) {
                *sv = (x - y).signum();
            }
            s
        };
        let sign_b = sign.clone();
        self.op(
            scalar_array(loss),
            vec![
                (
                    a,
                    Box::new(move |g: &ArrayD<f64>| {
                        let gs = g.iter().next().copied().unwrap();
                        &sign * (gs / n)
                    }),
                ),
                (
                    b,
                    Box::new(move |g: &ArrayD<f64>| {
                        let gs = g.iter().next().copied().unwrap();
                        &sign_b * (-gs / n)
                    }),
                ),
            ],
        )
    }

    /// 1-D earth mover distance between `z` and a fixed reference `r`:
    /// the mean absolute difference of the coordinate-sorted vectors.
    pub fn em_distance(&mut self, z: Var, reference: &[f64]) -> Var {
        let z_val = self.value(z).clone();
        let d = z_val.len();
        assert_eq!(d, reference.len(), "em_distance: dimension mismatch");
        let mut perm: Vec<usize> = (0..d).collect();
        let z_slice = z_val.as_slice().unwrap().to_vec();
        perm.sort_by(|&i, &j| z_slice[i].partial_cmp(&z_slice[j]).unwrap());
        let mut r_sorted = reference.to_vec();
        r_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut loss = 0.0;
        let mut signs = vec![0.0; d];
        for k in 0..d {
            let diff = z_slice[perm[k]] - r_sorted[k];
            loss += diff.abs();
            signs[k] = diff.signum();
        }
        loss /= d as f64;
        self.op(
            scalar_array(loss),
            vec![(
                z,
                Box::new(move |g: &ArrayD<f64>| {
                    let gs = g.iter().next().copied().unwrap();
                    let mut out = vec![0.0; d];
                    for k in 0..d {
                        out[perm[k]] = signs[k] * gs / d as f64;
                    }
                    Array1::from_vec(out).into_dyn()
                }),
            )],
        )
    }

    /// Logits `[Nq,n]` as negative (optionally squared) Euclidean distance
    /// from each query embedding to each prototype.
    pub fn neg_distance_logits(&mut self, queries: Var, prototypes: Var, squared: bool) -> Var {
        let q_val = self.value_rc(queries);
        let p_val = self.value_rc(prototypes);
        let q2 = q_val.view().into_dimensionality::<Ix2>().unwrap();
        let p2 = p_val.view().into_dimensionality::<Ix2>().unwrap();
        let (nq, d) = q2.dim();
        let n = p2.nrows();
        assert_eq!(d, p2.ncols());
        let mut dist = Array2::<f64>::zeros((nq, n));
        for i in 0..nq {
            for k in 0..n {
                let mut s = 0.0;
                for j in 0..d {
                    let df = q2[[i, j]] - p2[[k, j]];
                    s += df * df;
                }
                dist[[i, k]] = s;
            }
        }
        let value = if squared { dist.mapv(|s| -s) } else { dist.mapv(|s| -s.sqrt()) };
        let dist_a = dist.clone();
        let qa = q_val.clone();
        let pa = p_val.clone();
        let qb = q_val.clone();
        let pb = p_val.clone();
        let grad_coeff = move |s: f64| -> f64 {
            if squared {
                2.0
            } else {
                1.0 / s.sqrt().max(1e-12)
            }
        };
        let gc_a = grad_coeff.clone();
        let dist_b = dist;
        self.op(
            value.into_dyn(),
            vec![
                (
                    queries,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        let q2 = qa.view().into_dimensionality::<Ix2>().unwrap();
                        let p2 = pa.view().into_dimensionality::<Ix2>().unwrap();
                        let mut out = Array2::<f64>::zeros(q2.dim());
                        for i in 0..q2.nrows() {
                            for k in 0..p2.nrows() {
                                let coeff = gc_a(dist_a[[i, k]]) * g2[[i, k]];
                                for j in 0..q2.ncols() {
                                    out[[i, j]] -= coeff * (q2[[i, j]] - p2[[k, j]]);
                                }
                            }
                        }
                        out.into_dyn()
                    }),
                ),
                (
                    prototypes,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        let q2 = qb.view().into_dimensionality::<Ix2>().unwrap();
                        let p2 = pb.view().into_dimensionality::<Ix2>().unwrap();
                        let mut out = Array2::<f64>::zeros(p2.dim());
                        for i in 0..q2.nrows() {
                            for k in 0..p2.nrows() {
                                let coeff = grad_coeff(dist_b[[i, k]]) * g2[[i, k]];
                                for j in 0..q2.ncols() {
                                    out[[k, j]] += coeff * (q2[[i, j]] - p2[[k, j]]);
                                }
                            }
                        }
                        out.into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Mean cross entropy of softmax(logits) against integer labels, with
    /// the probability floored at `floor` before the log. Returns the loss
    /// node, the probability matrix, and the number of floored entries.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        floor: f64,
    ) -> (Var, Array2<f64>, usize) {
        let l2 = self.value(logits).view().into_dimensionality::<Ix2>().unwrap();
        let (nq, n) = l2.dim();
        assert_eq!(nq, labels.len());
        let mut probs = Array2::<f64>::zeros((nq, n));
        for i in 0..nq {
            let row = l2.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                probs[[i, j]] = e;
                denom += e;
            }
            for j in 0..n {
                probs[[i, j]] /= denom;
            }
        }
        let mut loss = 0.0;
        let mut floored = 0usize;
        let mut active = vec![true; nq];
        for (i, &y) in labels.iter().enumerate() {
            let p = probs[[i, y]];
            if p < floor {
                floored += 1;
                active[i] = false;
                loss += -floor.ln();
            } else {
                loss += -p.ln();
            }
        }
        loss /= nq as f64;
        let probs_cap = probs.clone();
        let labels_cap = labels.to_vec();
        let loss_var = self.op(
            scalar_array(loss),
            vec![(
                logits,
                Box::new(move |g: &ArrayD<f64>| {
                    let gs = g.iter().next().copied().unwrap();
                    let mut out = probs_cap.clone();
                    for (i, &y) in labels_cap.iter().enumerate() {
                        if active[i] {
                            out[[i, y]] -= 1.0;
                        } else {
                            out.row_mut(i).fill(0.0);
                        }
                    }
                    (out * (gs / nq as f64)).into_dyn()
                }),
            )],
        );
        (loss_var, probs, floored)
    }
}
