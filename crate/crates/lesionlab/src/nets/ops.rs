//! Array primitives used by the networks: convolution (im2col + GEMM),
//! pooling, activations, upsampling, fully connected layers, RoI align, and
//! NMS. Each primitive has a pure forward, a pure backward, and a
//! graph-recording wrapper, so inference and training share one code path.

use super::graph::{Graph, Var};
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView3, Axis, Ix2, Ix3, Ix4, s};

fn as4<'x>(x: &'x ArrayD<f64>, what: &str) -> ndarray::ArrayView4<'x, f64> {
    x.view().into_dimensionality::<Ix4>().unwrap_or_else(|_| panic!("{what}: expected 4-d [N,C,H,W], got {:?}", x.shape()))
}

fn as3<'x>(x: &'x ArrayD<f64>, what: &str) -> ArrayView3<'x, f64> {
    x.view().into_dimensionality::<Ix3>().unwrap_or_else(|_| panic!("{what}: expected 3-d, got {:?}", x.shape()))
}

fn as2<'x>(x: &'x ArrayD<f64>, what: &str) -> ndarray::ArrayView2<'x, f64> {
    x.view().into_dimensionality::<Ix2>().unwrap_or_else(|_| panic!("{what}: expected 2-d, got {:?}", x.shape()))
}

pub(crate) fn conv_out_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f64>, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Array3<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}

/// 2-d convolution over [N,C,H,W] with square kernel, symmetric padding.
pub fn conv2d_fwd(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let x4 = as4(x, "conv2d input");
    let w4 = as4(w, "conv2d weight");
    let (n, c, h, wid) = x4.dim();
    let (o, cw, k, k2) = w4.dim();
    assert_eq!(c, cw, "conv2d: channel mismatch");
    assert_eq!(k, k2, "conv2d: kernel must be square");
    assert_eq!(b.len(), o, "conv2d: bias length");
    let oh = conv_out_side(h, k, stride, pad);
    let ow = conv_out_side(wid, k, stride, pad);

    let wmat = w.to_shape((o, c * k * k)).expect("conv weight reshape");
    let bias = b.view().into_dimensionality::<ndarray::Ix1>().expect("bias 1-d");
    let mut out = ndarray::Array4::<f64>::zeros((n, o, oh, ow));
    for ni in 0..n {
        let col = im2col(x4.index_axis(Axis(0), ni), k, stride, pad, oh, ow);
        let mut y = wmat.dot(&col);
        for (mut row, bv) in y.outer_iter_mut().zip(bias.iter()) {
            row += *bv;
        }
        out.index_axis_mut(Axis(0), ni)
            .assign(&y.into_shape_with_order((o, oh, ow)).expect("conv output reshape"));
    }
    out.into_dyn()
}

/// Gradients for conv2d; `dx` is computed only when `need_dx`.
pub fn conv2d_bwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    dy: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<ArrayD<f64>>, ArrayD<f64>, ArrayD<f64>) {
    let x4 = as4(x, "conv2d input");
    let w4 = as4(w, "conv2d weight");
    let dy4 = as4(dy, "conv2d grad");
    let (n, c, h, wid) = x4.dim();
    let (o, _, k, _) = w4.dim();
    let (_, _, oh, ow) = dy4.dim();

    let wmat = w.to_shape((o, c * k * k)).expect("conv weight reshape");
    let mut dwmat = Array2::<f64>::zeros((o, c * k * k));
    let mut db = Array1::<f64>::zeros(o);
    let mut dx = need_dx.then(|| ndarray::Array4::<f64>::zeros((n, c, h, wid)));

    for ni in 0..n {
        let col = im2col(x4.index_axis(Axis(0), ni), k, stride, pad, oh, ow);
        let dyn_ = dy4.index_axis(Axis(0), ni);
        let dymat = dyn_.to_shape((o, oh * ow)).expect("grad reshape");
        dwmat += &dymat.dot(&col.t());
        db += &dymat.sum_axis(Axis(1));
        if let Some(dx) = dx.as_mut() {
            let dcol = wmat.t().dot(&dymat);
            dx.index_axis_mut(Axis(0), ni)
                .assign(&col2im(&dcol, c, h, wid, k, stride, pad));
        }
    }
    let dw = dwmat.into_shape_with_order((o, c, k, k)).expect("dw reshape").into_dyn();
    (dx.map(|a| a.into_dyn()), dw, db.into_dyn())
}

pub fn conv2d(g: &mut Graph<'_>, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
    let out = conv2d_fwd(g.val(x), g.val(w), g.val(b), stride, pad);
    let (xi, wi, bi) = (x.0, w.0, b.0);
    let need_dx = g.needs_grad(x);
    g.push(out, &[x, w, b], move |vals, dy, grads| {
        let (dx, dw, db) = conv2d_bwd(&vals[xi], &vals[wi], dy, stride, pad, need_dx);
        if let Some(dx) = dx {
            grads.add(xi, dx);
        }
        grads.add(wi, dw);
        grads.add(bi, db);
    })
}

/// 2x2 max pooling with stride 2. Ties break toward the first window element
/// in scan order. Returns flat per-plane argmax indices for the backward.
pub fn maxpool2_fwd(x: &ArrayD<f64>) -> (ArrayD<f64>, Vec<u32>) {
    let x4 = as4(x, "maxpool input");
    let (n, c, h, w) = x4.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = ndarray::Array4::<f64>::zeros((n, c, oh, ow));
    let mut idx = vec![0u32; n * c * oh * ow];
    let mut flat = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                            let v = x4[[ni, ci, iy, ix]];
                            if v > best {
                                best = v;
                                best_at = (iy * w + ix) as u32;
                            }
                        }
                    }
                    out[[ni, ci, oy, ox]] = best;
                    idx[flat] = best_at;
                    flat += 1;
                }
            }
        }
    }
    (out.into_dyn(), idx)
}

pub fn maxpool2_bwd(x_shape: &[usize], idx: &[u32], dy: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let dy4 = as4(dy, "maxpool grad");
    let (_, _, oh, ow) = dy4.dim();
    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
    let mut flat = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let at = idx[flat] as usize;
                    dx[[ni, ci, at / w, at % w]] += dy4[[ni, ci, oy, ox]];
                    flat += 1;
                }
            }
        }
    }
    dx.into_dyn()
}

pub fn maxpool2(g: &mut Graph<'_>, x: Var) -> Var {
    let (out, idx) = maxpool2_fwd(g.val(x));
    let xi = x.0;
    let x_shape: Vec<usize> = g.val(x).shape().to_vec();
    g.push(out, &[x], move |_vals, dy, grads| {
        grads.add(xi, maxpool2_bwd(&x_shape, &idx, dy));
    })
}

pub fn relu_fwd(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu(g: &mut Graph<'_>, x: Var) -> Var {
    let out = relu_fwd(g.val(x));
    let xi = x.0;
    g.push(out, &[x], move |vals, dy, grads| {
        let xval: &ArrayD<f64> = &vals[xi];
        let mut dx = dy.clone();
        dx.zip_mut_with(xval, |d, v| {
            if *v <= 0.0 {
                *d = 0.0;
            }
        });
        grads.add(xi, dx);
    })
}

pub fn sigmoid_fwd(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid(g: &mut Graph<'_>, x: Var) -> Var {
    let out = sigmoid_fwd(g.val(x));
    let xi = x.0;
    let out_id = g.len();
    g.push(out, &[x], move |vals, dy, grads| {
        let y: &ArrayD<f64> = &vals[out_id];
        let mut dx = dy.clone();
        dx.zip_mut_with(y, |d, s| *d *= s * (1.0 - s));
        grads.add(xi, dx);
    })
}

/// Nearest-neighbor 2x upsampling over [N,C,H,W].
pub fn upsample2_fwd(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = as4(x, "upsample input");
    let (n, c, h, w) = x4.dim();
    ndarray::Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(ni, ci, y, xx)| x4[[ni, ci, y / 2, xx / 2]]).into_dyn()
}

pub fn upsample2(g: &mut Graph<'_>, x: Var) -> Var {
    let out = upsample2_fwd(g.val(x));
    let xi = x.0;
    g.push(out, &[x], move |_vals, dy, grads| {
        let dy4 = as4(dy, "upsample grad");
        let (n, c, h2, w2) = dy4.dim();
        let mut dx = ndarray::Array4::<f64>::zeros((n, c, h2 / 2, w2 / 2));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dx[[ni, ci, y / 2, xx / 2]] += dy4[[ni, ci, y, xx]];
                    }
                }
            }
        }
        grads.add(xi, dx.into_dyn());
    })
}

/// Global average pooling [N,C,H,W] -> [N,C].
pub fn gap_fwd(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = as4(x, "gap input");
    let (_, _, h, w) = x4.dim();
    (x4.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64).into_dyn()
}

pub fn gap(g: &mut Graph<'_>, x: Var) -> Var {
    let out = gap_fwd(g.val(x));
    let xi = x.0;
    let shape: Vec<usize> = g.val(x).shape().to_vec();
    g.push(out, &[x], move |_vals, dy, grads| {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let dy2 = as2(dy, "gap grad");
        let scale = 1.0 / (h * w) as f64;
        let dx = ndarray::Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| dy2[[ni, ci]] * scale);
        grads.add(xi, dx.into_dyn());
    })
}

/// Fully connected layer: x [N,F] * w [O,F]^T + b [O].
pub fn linear_fwd(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let x2 = as2(x, "linear input");
    let w2 = as2(w, "linear weight");
    let mut y = x2.dot(&w2.t());
    let bias = b.view().into_dimensionality::<ndarray::Ix1>().expect("bias 1-d");
    for mut row in y.outer_iter_mut() {
        row += &bias;
    }
    y.into_dyn()
}

pub fn linear(g: &mut Graph<'_>, x: Var, w: Var, b: Var) -> Var {
    let out = linear_fwd(g.val(x), g.val(w), g.val(b));
    let (xi, wi, bi) = (x.0, w.0, b.0);
    let need_dx = g.needs_grad(x);
    g.push(out, &[x, w, b], move |vals, dy, grads| {
        let dy2 = as2(dy, "linear grad");
        let x2 = as2(&vals[xi], "linear input");
        let w2 = as2(&vals[wi], "linear weight");
        grads.add(wi, dy2.t().dot(&x2).into_dyn());
        grads.add(bi, dy2.sum_axis(Axis(0)).into_dyn());
        if need_dx {
            grads.add(xi, dy2.dot(&w2).into_dyn());
        }
    })
}

/// Row-wise softmax over [N,K].
pub fn softmax_rows_fwd(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x2 = as2(x, "softmax input");
    let mut y = x2.to_owned();
    for mut row in y.outer_iter_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y.into_dyn()
}

pub fn softmax_rows(g: &mut Graph<'_>, x: Var) -> Var {
    let out = softmax_rows_fwd(g.val(x));
    let xi = x.0;
    let out_id = g.len();
    g.push(out, &[x], move |vals, dy, grads| {
        let y2 = as2(&vals[out_id], "softmax value");
        let dy2 = as2(dy, "softmax grad");
        let mut dx = dy2.to_owned();
        for (mut drow, yrow) in dx.outer_iter_mut().zip(y2.outer_iter()) {
            let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
            drow.zip_mut_with(&yrow, |d, y| *d = y * (*d - dot));
        }
        grads.add(xi, dx.into_dyn());
    })
}

/// Channel concatenation of two [N,C,H,W] tensors.
pub fn concat_ch(g: &mut Graph<'_>, a: Var, b: Var) -> Var {
    let av = as4(g.val(a), "concat lhs");
    let bv = as4(g.val(b), "concat rhs");
    let c1 = av.dim().1;
    let out = ndarray::concatenate(Axis(1), &[av, bv]).expect("concat shape").into_dyn();
    let (ai, bi) = (a.0, b.0);
    g.push(out, &[a, b], move |_vals, dy, grads| {
        let dy4 = as4(dy, "concat grad");
        grads.add(ai, dy4.slice(s![.., ..c1, .., ..]).to_owned().into_dyn());
        grads.add(bi, dy4.slice(s![.., c1.., .., ..]).to_owned().into_dyn());
    })
}

/// Elementwise sum of two same-shape tensors.
pub fn add(g: &mut Graph<'_>, a: Var, b: Var) -> Var {
    let out = g.val(a) + g.val(b);
    let (ai, bi) = (a.0, b.0);
    let (need_a, need_b) = (g.needs_grad(a), g.needs_grad(b));
    g.push(out, &[a, b], move |_vals, dy, grads| {
        if need_a {
            grads.add(ai, dy.clone());
        }
        if need_b {
            grads.add(bi, dy.clone());
        }
    })
}

/// Scalar multiple.
pub fn scale(g: &mut Graph<'_>, x: Var, k: f64) -> Var {
    let out = g.val(x).mapv(|v| v * k);
    let xi = x.0;
    g.push(out, &[x], move |_vals, dy, grads| {
        grads.add(xi, dy.mapv(|v| v * k));
    })
}

/// Reshape preserving element order (inputs are standard layout).
pub fn reshape(g: &mut Graph<'_>, x: Var, shape: &[usize]) -> Var {
    let out = g
        .val(x)
        .to_owned()
        .into_shape_with_order(ndarray::IxDyn(shape))
        .expect("reshape: element count mismatch");
    let xi = x.0;
    let old_shape: Vec<usize> = g.val(x).shape().to_vec();
    g.push(out, &[x], move |_vals, dy, grads| {
        let dx = dy
            .to_owned()
            .into_shape_with_order(ndarray::IxDyn(&old_shape))
            .expect("reshape grad");
        grads.add(xi, dx);
    })
}

/// Selects one index along axis 0.
pub fn index_axis0(g: &mut Graph<'_>, x: Var, i: usize) -> Var {
    let out = g.val(x).index_axis(Axis(0), i).to_owned();
    let xi = x.0;
    let shape: Vec<usize> = g.val(x).shape().to_vec();
    g.push(out, &[x], move |_vals, dy, grads| {
        let mut dx = ArrayD::<f64>::zeros(ndarray::IxDyn(&shape));
        dx.index_axis_mut(Axis(0), i).assign(dy);
        grads.add(xi, dx);
    })
}

/// Gathers flat-index elements into a vector [K].
pub fn gather_flat(g: &mut Graph<'_>, x: Var, indices: Vec<usize>) -> Var {
    let flat = g.val(x).as_slice().expect("gather: standard layout");
    let out = Array1::from_iter(indices.iter().map(|i| flat[*i])).into_dyn();
    let xi = x.0;
    let shape: Vec<usize> = g.val(x).shape().to_vec();
    g.push(out, &[x], move |_vals, dy, grads| {
        let mut dx = ArrayD::<f64>::zeros(ndarray::IxDyn(&shape));
        {
            let dslice = dx.as_slice_mut().expect("standard layout");
            for (k, i) in indices.iter().enumerate() {
                dslice[*i] += dy[[k]];
            }
        }
        grads.add(xi, dx);
    })
}

/// RoI align: bilinear pooling of feature map [C,h,w] over `boxes` given in
/// feature coordinates, one sample per output cell, to [R,C,S,S].
/// Degenerate or empty box lists yield an empty [0,C,S,S] tensor.
pub fn roi_align_fwd(feat: &ArrayD<f64>, boxes: &[[f64; 4]], out_size: usize) -> ArrayD<f64> {
    let f3 = as3(feat, "roi_align feature");
    let (c, h, w) = f3.dim();
    let r = boxes.len();
    let s = out_size;
    let mut out = ndarray::Array4::<f64>::zeros((r, c, s, s));
    for (ri, bx) in boxes.iter().enumerate() {
        for iy in 0..s {
            for ix in 0..s {
                let (py, px) = roi_sample_point(bx, s, iy, ix);
                let (y0, x0, wy, wx) = bilinear_coords(py, px, h, w);
                for ci in 0..c {
                    let v = f3[[ci, y0, x0]] * (1.0 - wy) * (1.0 - wx)
                        + f3[[ci, y0, (x0 + 1).min(w - 1)]] * (1.0 - wy) * wx
                        + f3[[ci, (y0 + 1).min(h - 1), x0]] * wy * (1.0 - wx)
                        + f3[[ci, (y0 + 1).min(h - 1), (x0 + 1).min(w - 1)]] * wy * wx;
                    out[[ri, ci, iy, ix]] = v;
                }
            }
        }
    }
    out.into_dyn()
}

fn roi_sample_point(bx: &[f64; 4], s: usize, iy: usize, ix: usize) -> (f64, f64) {
    let bw = (bx[2] - bx[0]).max(1e-6);
    let bh = (bx[3] - bx[1]).max(1e-6);
    let py = bx[1] + (iy as f64 + 0.5) * bh / s as f64;
    let px = bx[0] + (ix as f64 + 0.5) * bw / s as f64;
    (py, px)
}

/// Continuous point (pixel centers at integer + 0.5) to bilinear corners.
fn bilinear_coords(py: f64, px: f64, h: usize, w: usize) -> (usize, usize, f64, f64) {
    let v = (py - 0.5).clamp(0.0, (h - 1) as f64);
    let u = (px - 0.5).clamp(0.0, (w - 1) as f64);
    let y0 = v.floor();
    let x0 = u.floor();
    (y0 as usize, x0 as usize, v - y0, u - x0)
}

pub fn roi_align_bwd(feat_shape: &[usize], boxes: &[[f64; 4]], out_size: usize, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, h, w) = (feat_shape[0], feat_shape[1], feat_shape[2]);
    let dy4 = as4(dy, "roi_align grad");
    let s = out_size;
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for (ri, bx) in boxes.iter().enumerate() {
        for iy in 0..s {
            for ix in 0..s {
                let (py, px) = roi_sample_point(bx, s, iy, ix);
                let (y0, x0, wy, wx) = bilinear_coords(py, px, h, w);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                for ci in 0..c {
                    let gv = dy4[[ri, ci, iy, ix]];
                    dx[[ci, y0, x0]] += gv * (1.0 - wy) * (1.0 - wx);
                    dx[[ci, y0, x1]] += gv * (1.0 - wy) * wx;
                    dx[[ci, y1, x0]] += gv * wy * (1.0 - wx);
                    dx[[ci, y1, x1]] += gv * wy * wx;
                }
            }
        }
    }
    dx.into_dyn()
}

pub fn roi_align(g: &mut Graph<'_>, feat: Var, boxes: Vec<[f64; 4]>, out_size: usize) -> Var {
    let out = roi_align_fwd(g.val(feat), &boxes, out_size);
    let fi = feat.0;
    let shape: Vec<usize> = g.val(feat).shape().to_vec();
    g.push(out, &[feat], move |_vals, dy, grads| {
        grads.add(fi, roi_align_bwd(&shape, &boxes, out_size, dy));
    })
}

/// IoU of two (x0,y0,x1,y1) boxes; degenerate boxes give 0.
pub(crate) fn iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression; returns kept indices in descending score
/// order. Ties break by lower index for determinism.
pub fn nms(boxes: &[[f64; 4]], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes/scores length mismatch");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou_xyxy(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::graph::Graph;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar-valued graph builder with
    /// respect to one input array, compared against analytic gradients.
    fn grad_check(
        build: impl Fn(&mut Graph<'_>, Var) -> Var,
        x: &ArrayD<f64>,
        samples: usize,
        seed: u64,
        tol: f64,
    ) {
        let mut g = Graph::recording();
        let xv = g.leaf(x, true);
        let loss = build(&mut g, xv);
        let mut grads = g.backward(loss);
        let analytic = grads.take(xv).expect("gradient reached input");

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat_len = x.len();
        for _ in 0..samples {
            let i = rng.random_range(0..flat_len);
            let h = 1e-6;
            let eval = |delta: f64| -> f64 {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[i] += delta;
                let mut g = Graph::recording();
                let xv = g.leaf_owned(xp, false);
                let loss = build(&mut g, xv);
                g.scalar(loss)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel <= tol || (a - numeric).abs() <= 1e-9,
                "index {i}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }

    fn weighted_sum(g: &mut Graph<'_>, x: Var, weights: ArrayD<f64>) -> Var {
        let total: f64 = (g.val(x) * &weights).sum();
        let xi = x.0;
        g.push(ndarray::arr0(total).into_dyn(), &[x], move |_vals, dy, grads| {
            let s = dy[[]];
            grads.add(xi, weights.mapv(|w| w * s));
        })
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&[2, 3, 5, 5], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        let b = randn(&[4], &mut rng);
        let y = conv2d_fwd(&x, &w, &b, 1, 1);
        // Direct quadruple-loop convolution.
        for ni in 0..2 {
            for o in 0..4 {
                for oy in 0..5usize {
                    for ox in 0..5usize {
                        let mut acc = b[[o]];
                        for c in 0..3 {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                        continue;
                                    }
                                    acc += x[[ni, c, iy as usize, ix as usize]] * w[[o, c, ky, kx]];
                                }
                            }
                        }
                        let got = y[[ni, o, oy, ox]];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[1, 2, 6, 6], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        let wt = weights_fixture(&mut rng, &[1, 3, 6, 6]);

        // d/dw and d/db checked by treating each as the probed input.
        let xc = x.clone();
        let bc = b.clone();
        let wtc = wt.clone();
        grad_check(
            move |g, wv| {
                let xv = g.leaf_owned(xc.clone(), false);
                let bv = g.leaf_owned(bc.clone(), false);
                let y = conv2d(g, xv, wv, bv, 1, 1);
                weighted_sum(g, y, wtc.clone())
            },
            &w,
            24,
            10,
            1e-5,
        );
        let wc = w.clone();
        let bc = b.clone();
        let wtc = wt.clone();
        grad_check(
            move |g, xv| {
                let wv = g.leaf_owned(wc.clone(), false);
                let bv = g.leaf_owned(bc.clone(), false);
                // Route grads through x by marking it as the probe.
                let y = conv2d_probe_x(g, xv, wv, bv);
                weighted_sum(g, y, wtc.clone())
            },
            &x,
            24,
            11,
            1e-5,
        );
    }

    /// conv2d with x as the differentiated operand: identical wiring, but x
    /// is the leaf under test so need_dx must be honored.
    fn conv2d_probe_x(g: &mut Graph<'_>, x: Var, w: Var, b: Var) -> Var {
        conv2d(g, x, w, b, 1, 1)
    }

    fn weights_fixture(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn strided_conv_shapes_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[1, 2, 8, 8], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        let y = conv2d_fwd(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        let wt = weights_fixture(&mut rng, &[1, 3, 4, 4]);
        let xc = x.clone();
        let bc = b.clone();
        grad_check(
            move |g, wv| {
                let xv = g.leaf_owned(xc.clone(), false);
                let bv = g.leaf_owned(bc.clone(), false);
                let y = conv2d(g, xv, wv, bv, 2, 1);
                weighted_sum(g, y, wt.clone())
            },
            &w,
            16,
            12,
            1e-5,
        );
    }

    #[test]
    fn maxpool_upsample_gap_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[2, 3, 4, 4], &mut rng);
        let wt1 = weights_fixture(&mut rng, &[2, 3, 2, 2]);
        grad_check(
            move |g, xv| {
                let y = maxpool2(g, xv);
                weighted_sum(g, y, wt1.clone())
            },
            &x,
            20,
            13,
            1e-5,
        );
        let x = randn(&[1, 2, 3, 3], &mut rng);
        let wt2 = weights_fixture(&mut rng, &[1, 2, 6, 6]);
        grad_check(
            move |g, xv| {
                let y = upsample2(g, xv);
                weighted_sum(g, y, wt2.clone())
            },
            &x,
            18,
            14,
            1e-5,
        );
        let x = randn(&[2, 4, 3, 3], &mut rng);
        let wt3 = weights_fixture(&mut rng, &[2, 4]);
        grad_check(
            move |g, xv| {
                let y = gap(g, xv);
                weighted_sum(g, y, wt3.clone())
            },
            &x,
            18,
            15,
            1e-5,
        );
    }

    #[test]
    fn linear_softmax_activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&[3, 5], &mut rng);
        let w = randn(&[4, 5], &mut rng);
        let b = randn(&[4], &mut rng);
        let wt = weights_fixture(&mut rng, &[3, 4]);
        let xc = x.clone();
        let bc = b.clone();
        let wtc = wt.clone();
        grad_check(
            move |g, wv| {
                let xv = g.leaf_owned(xc.clone(), false);
                let bv = g.leaf_owned(bc.clone(), false);
                let y = linear(g, xv, wv, bv);
                let sm = softmax_rows(g, y);
                weighted_sum(g, sm, wtc.clone())
            },
            &w,
            20,
            16,
            1e-5,
        );
        let wt4 = weights_fixture(&mut rng, &[3, 5]);
        grad_check(
            move |g, xv| {
                let y = relu(g, xv);
                let z = sigmoid(g, y);
                weighted_sum(g, z, wt4.clone())
            },
            &x,
            20,
            17,
            1e-5,
        );
    }

    #[test]
    fn roi_align_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feat = randn(&[2, 6, 6], &mut rng);
        let boxes = vec![[0.7, 1.1, 4.3, 5.2], [2.0, 0.5, 5.5, 3.0]];
        let wt = weights_fixture(&mut rng, &[2, 2, 3, 3]);
        grad_check(
            move |g, fv| {
                let y = roi_align(g, fv, boxes.clone(), 3);
                weighted_sum(g, y, wt.clone())
            },
            &feat,
            24,
            18,
            1e-5,
        );
    }

    #[test]
    fn nms_suppresses_overlapping_lower_score() {
        let boxes = vec![[0.0, 0.0, 10.0, 10.0], [0.5, 0.5, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]];
        let scores = vec![0.8, 0.6, 0.9];
        let keep = nms(&boxes, &scores, 0.5);
        assert_eq!(keep, vec![2, 0]);
    }

    #[test]
    fn concat_add_scale_reshape_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&[1, 2, 3, 3], &mut rng);
        let b = randn(&[1, 3, 3, 3], &mut rng);
        let wt = weights_fixture(&mut rng, &[1, 5, 3, 3]);
        let bc = b.clone();
        grad_check(
            move |g, av| {
                let bv = g.leaf_owned(bc.clone(), false);
                let y = concat_ch(g, av, bv);
                weighted_sum(g, y, wt.clone())
            },
            &a,
            12,
            19,
            1e-5,
        );
        let x = randn(&[2, 6], &mut rng);
        let wt5 = weights_fixture(&mut rng, &[12], );
        grad_check(
            move |g, xv| {
                let y = scale(g, xv, -2.5);
                let z = reshape(g, y, &[12]);
                weighted_sum(g, z, wt5.clone())
            },
            &x,
            12,
            20,
            1e-5,
        );
    }

    #[test]
    fn gather_and_index_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&[3, 4], &mut rng);
        let wt = weights_fixture(&mut rng, &[5]);
        grad_check(
            move |g, xv| {
                let y = gather_flat(g, xv, vec![0, 5, 5, 11, 3]);
                weighted_sum(g, y, wt.clone())
            },
            &x,
            10,
            21,
            1e-5,
        );
        let wt6 = weights_fixture(&mut rng, &[4]);
        grad_check(
            move |g, xv| {
                let y = index_axis0(g, xv, 1);
                weighted_sum(g, y, wt6.clone())
            },
            &x,
            10,
            22,
            1e-5,
        );
    }

    #[test]
    fn inference_graph_records_no_tape()
    {
        let x = ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.5);
        let w = ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 0.1);
        let b = ArrayD::zeros(IxDyn(&[1]));
        let mut g = Graph::inference();
        let xv = g.leaf(&x, true);
        let wv = g.leaf(&w, true);
        let bv = g.leaf(&b, true);
        let y = conv2d(&mut g, xv, wv, bv, 1, 1);
        assert!(!g.needs_grad(y));
    }
}
