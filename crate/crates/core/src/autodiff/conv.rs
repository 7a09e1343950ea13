//! Grid operations: strided convolution, sampled (deformable) 3x3
//! convolution, bilinear sampling and channel plumbing.

use super::{BackwardArgs, Tensor, Var};

/// Bilinear corners of `(x, y)` on a `width x height` grid with zero padding.
/// Returns up to four `(flat cell index, weight)` pairs plus the fractional
/// parts used by the coordinate derivative. Out-of-range corners are dropped.
pub fn bilinear_weights(x: f64, y: f64, width: usize, height: usize) -> ([(Option<usize>, f64); 4], f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let cell = |cx: i64, cy: i64| -> Option<usize> {
        (cx >= 0 && cy >= 0 && (cx as usize) < width && (cy as usize) < height)
            .then(|| cy as usize * width + cx as usize)
    };
    (
        [
            (cell(x0, y0), (1.0 - fx) * (1.0 - fy)),
            (cell(x0 + 1, y0), fx * (1.0 - fy)),
            (cell(x0, y0 + 1), (1.0 - fx) * fy),
            (cell(x0 + 1, y0 + 1), fx * fy),
        ],
        fx,
        fy,
    )
}

/// Samples every channel at `(x, y)` into `out`, returning the corners so the
/// caller can reuse them.
fn sample_into(data: &[f64], w: usize, h: usize, c: usize, x: f64, y: f64, out: &mut [f64]) -> ([(Option<usize>, f64); 4], f64, f64) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let corners = bilinear_weights(x, y, w, h);
    for &(cell, wt) in &corners.0 {
        if let Some(cell) = cell {
            if wt != 0.0 {
                let row = &data[cell * c..cell * c + c];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += wt * v;
                }
            }
        }
    }
    corners
}

/// Accumulates the gradient of a bilinear sample: `gv` is the gradient with
/// respect to the sampled channel vector. Returns `(d/dx, d/dy)`.
#[allow(clippy::too_many_arguments)]
fn sample_backward(
    data: &[f64],
    c: usize,
    corners: &([(Option<usize>, f64); 4], f64, f64),
    gv: &[f64],
    gin: Option<&mut [f64]>,
) -> (f64, f64) {
    let (cs, fx, fy) = corners;
    if let Some(gin) = gin {
        for &(cell, wt) in cs {
            if let Some(cell) = cell {
                if wt != 0.0 {
                    for (gi, g) in gin[cell * c..cell * c + c].iter_mut().zip(gv) {
                        *gi += wt * g;
                    }
                }
            }
        }
    }
    let val = |k: usize, ch: usize| cs[k].0.map_or(0.0, |cell| data[cell * c + ch]);
    let (mut gx, mut gy) = (0.0, 0.0);
    for (ch, g) in gv.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        let (v00, v10, v01, v11) = (val(0, ch), val(1, ch), val(2, ch), val(3, ch));
        gx += g * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
        gy += g * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
    }
    (gx, gy)
}

/// Zero-padded `k x k` convolution with the given stride. `weight` has shape
/// `[k*k, cin, cout]` (taps row-major), `bias` shape `[cout]`.
pub fn conv2d<'t>(input: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>, k: usize, stride: usize) -> Var<'t> {
    let tape = input.tape;
    let mut ids = vec![input.id, weight.id];
    if let Some(b) = bias {
        ids.push(b.id);
    }
    let dims = tape.with_values(&ids[..2], |v| {
        let (h, w, cin) = (v[0].shape()[0], v[0].shape()[1], v[0].shape()[2]);
        assert_eq!(v[1].shape(), &[k * k, cin, v[1].shape()[2]], "conv2d weight shape");
        (h, w, cin, v[1].shape()[2])
    });
    let (h, w, cin, cout) = dims;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let pad = (k / 2) as i64;
    let out = tape.with_values(&ids, |v| {
        let (x, wt) = (v[0].data(), v[1].data());
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                if let Some(b) = v.get(2) {
                    orow.copy_from_slice(b.data());
                }
                for ky in 0..k {
                    let iy = (oy * stride) as i64 + ky as i64 - pad;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride) as i64 + kx as i64 - pad;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        let irow = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                        let tap = (ky * k + kx) * cin;
                        for (ci, &xv) in irow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wt[(tap + ci) * cout..][..cout];
                            for (o, wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![ho, wo, cout], out)
    });
    let parents: Vec<Var<'t>> = match bias {
        Some(b) => vec![input, weight, b],
        None => vec![input, weight],
    };
    tape.push(
        out,
        &parents,
        Box::new(move |a: &BackwardArgs<'_>| {
            let (x, wt) = (a.inputs[0].data(), a.inputs[1].data());
            let mut gx = a.needs[0].then(|| vec![0.0; x.len()]);
            let mut gw = a.needs[1].then(|| vec![0.0; wt.len()]);
            let mut gb = a.needs.get(2).copied().unwrap_or(false).then(|| vec![0.0; cout]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = &a.gout[(oy * wo + ox) * cout..][..cout];
                    if let Some(gb) = gb.as_mut() {
                        gb.iter_mut().zip(g).for_each(|(b, g)| *b += g);
                    }
                    for ky in 0..k {
                        let iy = (oy * stride) as i64 + ky as i64 - pad;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride) as i64 + kx as i64 - pad;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let base = (iy as usize * w + ix as usize) * cin;
                            let tap = (ky * k + kx) * cin;
                            for ci in 0..cin {
                                let wrow = &wt[(tap + ci) * cout..][..cout];
                                if let Some(gx) = gx.as_mut() {
                                    gx[base + ci] += wrow.iter().zip(g).map(|(w, g)| w * g).sum::<f64>();
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let xv = x[base + ci];
                                    if xv != 0.0 {
                                        for (gwv, gv) in gw[(tap + ci) * cout..][..cout].iter_mut().zip(g) {
                                            *gwv += xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        }),
    )
}

/// 3x3 convolution whose nine taps sample `input` bilinearly at arbitrary
/// coordinates.
///
/// * `weight`: `[9, cin, cout]`
/// * `coords`: `[ho, wo, 9, 2]` absolute `(x, y)` grid coordinates per tap
/// * `modulation`: optional `[ho, wo, 9]` per-tap amplitudes
///
/// Output shape is `[ho, wo, cout]`. Differentiable with respect to all four
/// inputs.
pub fn sampled_conv3x3<'t>(input: Var<'t>, weight: Var<'t>, coords: Var<'t>, modulation: Option<Var<'t>>) -> Var<'t> {
    let tape = input.tape;
    let mut parents = vec![input, weight, coords];
    if let Some(m) = modulation {
        parents.push(m);
    }
    let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
    let (h, w, cin, cout, ho, wo) = tape.with_values(&ids, |v| {
        let (h, w, cin) = (v[0].shape()[0], v[0].shape()[1], v[0].shape()[2]);
        assert_eq!(v[1].shape().len(), 3, "sampled conv weight must be [9, cin, cout]");
        assert_eq!(&v[1].shape()[..2], &[9, cin], "sampled conv weight shape");
        let cs = v[2].shape();
        assert!(cs.len() == 4 && cs[2] == 9 && cs[3] == 2, "coords must be [ho, wo, 9, 2]");
        if let Some(m) = v.get(3) {
            assert_eq!(m.shape(), &[cs[0], cs[1], 9], "modulation shape");
        }
        (h, w, cin, v[1].shape()[2], cs[0], cs[1])
    });
    let out = tape.with_values(&ids, |v| {
        let (x, wt, co) = (v[0].data(), v[1].data(), v[2].data());
        let m = v.get(3).map(|t| t.data());
        let mut out = vec![0.0; ho * wo * cout];
        let mut s = vec![0.0; cin];
        for p in 0..ho * wo {
            let orow = &mut out[p * cout..(p + 1) * cout];
            for j in 0..9 {
                let mj = m.map_or(1.0, |m| m[p * 9 + j]);
                let (cx, cy) = (co[(p * 9 + j) * 2], co[(p * 9 + j) * 2 + 1]);
                sample_into(x, w, h, cin, cx, cy, &mut s);
                for (ci, &sv) in s.iter().enumerate() {
                    if sv == 0.0 {
                        continue;
                    }
                    let sv = sv * mj;
                    let wrow = &wt[(j * cin + ci) * cout..][..cout];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += sv * wv;
                    }
                }
            }
        }
        Tensor::new(vec![ho, wo, cout], out)
    });
    tape.push(
        out,
        &parents,
        Box::new(move |a: &BackwardArgs<'_>| {
            let (x, wt, co) = (a.inputs[0].data(), a.inputs[1].data(), a.inputs[2].data());
            let m = a.inputs.get(3).map(|t| t.data());
            let mut gx = a.needs[0].then(|| vec![0.0; x.len()]);
            let mut gw = a.needs[1].then(|| vec![0.0; wt.len()]);
            let mut gc = a.needs[2].then(|| vec![0.0; co.len()]);
            let mut gm = a.needs.get(3).copied().unwrap_or(false).then(|| vec![0.0; ho * wo * 9]);
            let mut s = vec![0.0; cin];
            let mut t = vec![0.0; cin];
            for p in 0..ho * wo {
                let g = &a.gout[p * cout..(p + 1) * cout];
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for j in 0..9 {
                    let mj = m.map_or(1.0, |m| m[p * 9 + j]);
                    let (cx, cy) = (co[(p * 9 + j) * 2], co[(p * 9 + j) * 2 + 1]);
                    let corners = sample_into(x, w, h, cin, cx, cy, &mut s);
                    for ci in 0..cin {
                        let wrow = &wt[(j * cin + ci) * cout..][..cout];
                        t[ci] = wrow.iter().zip(g).map(|(w, g)| w * g).sum();
                    }
                    if let Some(gm) = gm.as_mut() {
                        gm[p * 9 + j] += s.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(gw) = gw.as_mut() {
                        for (ci, &sv) in s.iter().enumerate() {
                            if sv == 0.0 {
                                continue;
                            }
                            let sv = sv * mj;
                            for (gwv, gv) in gw[(j * cin + ci) * cout..][..cout].iter_mut().zip(g) {
                                *gwv += sv * gv;
                            }
                        }
                    }
                    if gx.is_some() || gc.is_some() {
                        t.iter_mut().for_each(|v| *v *= mj);
                        let (dx, dy) = sample_backward(x, cin, &corners, &t, gx.as_deref_mut());
                        if let Some(gc) = gc.as_mut() {
                            gc[(p * 9 + j) * 2] += dx;
                            gc[(p * 9 + j) * 2 + 1] += dy;
                        }
                    }
                }
            }
            vec![gx, gw, gc, gm]
        }),
    )
}

/// Samples `input` at `coords` (`[n, 2]`, grid `(x, y)` units) with zero
/// padding. Output `[n, channels]`.
pub fn bilinear_sample<'t>(input: Var<'t>, coords: Var<'t>) -> Var<'t> {
    let tape = input.tape;
    let (h, w, c, n) = tape.with_values(&[input.id, coords.id], |v| {
        let s = v[0].shape();
        assert_eq!(v[1].len() % 2, 0, "coords must be (x, y) pairs");
        (s[0], s[1], s[2], v[1].len() / 2)
    });
    let out = tape.with_values(&[input.id, coords.id], |v| {
        let (x, co) = (v[0].data(), v[1].data());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            sample_into(x, w, h, c, co[2 * i], co[2 * i + 1], &mut out[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![n, c], out)
    });
    tape.push(
        out,
        &[input, coords],
        Box::new(move |a: &BackwardArgs<'_>| {
            let (x, co) = (a.inputs[0].data(), a.inputs[1].data());
            let mut gx = a.needs[0].then(|| vec![0.0; x.len()]);
            let mut gc = vec![0.0; co.len()];
            for i in 0..n {
                let corners = bilinear_weights(co[2 * i], co[2 * i + 1], w, h);
                let (dx, dy) = sample_backward(x, c, &corners, &a.gout[i * c..(i + 1) * c], gx.as_deref_mut());
                gc[2 * i] = dx;
                gc[2 * i + 1] = dy;
            }
            vec![gx, a.needs[1].then_some(gc)]
        }),
    )
}

/// Applies a fixed linear map over the leading 9-tap axis of a kernel:
/// `out[j, ..] = sum_i map[j][i] * kernel[i, ..]`.
pub fn tap_transform<'t>(kernel: Var<'t>, map: [[f64; 9]; 9]) -> Var<'t> {
    let tape = kernel.tape;
    let out = tape.with_values(&[kernel.id], |v| {
        assert_eq!(v[0].shape()[0], 9, "tap transform needs a leading 9-tap axis");
        let r = v[0].len() / 9;
        let k = v[0].data();
        let mut out = vec![0.0; k.len()];
        for j in 0..9 {
            for i in 0..9 {
                let c = map[j][i];
                if c != 0.0 {
                    for e in 0..r {
                        out[j * r + e] += c * k[i * r + e];
                    }
                }
            }
        }
        Tensor::new(v[0].shape().to_vec(), out)
    });
    tape.push(
        out,
        &[kernel],
        Box::new(move |a: &BackwardArgs<'_>| {
            let r = a.gout.len() / 9;
            let mut g = vec![0.0; a.gout.len()];
            for j in 0..9 {
                for i in 0..9 {
                    let c = map[j][i];
                    if c != 0.0 {
                        for e in 0..r {
                            g[i * r + e] += c * a.gout[j * r + e];
                        }
                    }
                }
            }
            vec![Some(g)]
        }),
    )
}

impl<'t> Var<'t> {
    /// Nearest-neighbour 2x upsampling of a grid.
    pub fn upsample2x(self) -> Var<'t> {
        let (h, w, c) = self.tape.with_values(&[self.id], |v| (v[0].shape()[0], v[0].shape()[1], v[0].shape()[2]));
        let out = self.tape.with_values(&[self.id], |v| {
            Tensor::grid_from_fn(2 * w, 2 * h, c, |x, y, ch| v[0].at(x / 2, y / 2, ch))
        });
        self.tape.push(
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let mut g = vec![0.0; h * w * c];
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        for ch in 0..c {
                            g[((y / 2) * w + x / 2) * c + ch] += a.gout[(y * 2 * w + x) * c + ch];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean over all positions; shape `[1, 1, channels]`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let (h, w, c) = self.tape.with_values(&[self.id], |v| (v[0].shape()[0], v[0].shape()[1], v[0].shape()[2]));
        let n = (h * w) as f64;
        let out = self.tape.with_values(&[self.id], |v| {
            let mut acc = vec![0.0; c];
            for (i, x) in v[0].data().iter().enumerate() {
                acc[i % c] += x;
            }
            Tensor::new(vec![1, 1, c], acc.into_iter().map(|s| s / n).collect())
        });
        self.tape.push(
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                vec![Some((0..h * w * c).map(|i| a.gout[i % c] / n).collect())]
            }),
        )
    }

    /// Channels `start..start + len` of a grid.
    pub fn slice_channels(self, start: usize, len: usize) -> Var<'t> {
        let (h, w, c) = self.tape.with_values(&[self.id], |v| (v[0].shape()[0], v[0].shape()[1], v[0].shape()[2]));
        assert!(start + len <= c);
        let out = self.tape.with_values(&[self.id], |v| {
            Tensor::grid_from_fn(w, h, len, |x, y, ch| v[0].at(x, y, start + ch))
        });
        self.tape.push(
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let mut g = vec![0.0; h * w * c];
                for p in 0..h * w {
                    g[p * c + start..p * c + start + len].copy_from_slice(&a.gout[p * len..(p + 1) * len]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Stacks two grids of equal spatial size along the channel axis.
    pub fn concat_channels(self, other: Var<'t>) -> Var<'t> {
        let (h, w, ca, cb) = self.tape.with_values(&[self.id, other.id], |v| {
            assert_eq!(v[0].shape()[..2], v[1].shape()[..2], "concat_channels spatial mismatch");
            (v[0].shape()[0], v[0].shape()[1], v[0].shape()[2], v[1].shape()[2])
        });
        let out = self.tape.with_values(&[self.id, other.id], |v| {
            Tensor::grid_from_fn(w, h, ca + cb, |x, y, ch| {
                if ch < ca {
                    v[0].at(x, y, ch)
                } else {
                    v[1].at(x, y, ch - ca)
                }
            })
        });
        self.tape.push(
            out,
            &[self, other],
            Box::new(move |a: &BackwardArgs<'_>| {
                let c = ca + cb;
                let mut g0 = vec![0.0; h * w * ca];
                let mut g1 = vec![0.0; h * w * cb];
                for p in 0..h * w {
                    g0[p * ca..(p + 1) * ca].copy_from_slice(&a.gout[p * c..p * c + ca]);
                    g1[p * cb..(p + 1) * cb].copy_from_slice(&a.gout[p * c + ca..(p + 1) * c]);
                }
                vec![Some(g0), Some(g1)]
            }),
        )
    }
}
