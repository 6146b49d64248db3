//! Forward/backward definitions for the operator set the model needs.

use super::linalg::{col2im_add, im2col, mm, mm_abt, mm_atb, ConvShape};
use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise reduction used when feature grids from several pyramid levels
/// (or the two mask predictions) are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Max,
    Sum,
    Product,
}

impl std::str::FromStr for FuseMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "max" => Ok(FuseMode::Max),
            "sum" => Ok(FuseMode::Sum),
            "product" | "prod" => Ok(FuseMode::Product),
            other => Err(format!("unknown fusion mode `{other}` (max|sum|product)")),
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::contract(
            "add",
            format!("shape {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(g);
            }
            if pb.requires_grad() {
                pb.accumulate_grad(g);
            }
        }),
    ))
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| x * factor).collect();
    let pa = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let gx: Vec<f64> = g.iter().map(|&v| v * factor).collect();
            pa.accumulate_grad(&gx);
        }),
    )
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    let pa = a.clone();
    let n = a.numel();
    Tensor::from_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(move |g| {
            pa.accumulate_grad(&vec![g[0]; n]);
        }),
    )
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(Error::contract(
            "reshape",
            format!("cannot view {:?} as {:?}", a.shape(), shape),
        ));
    }
    let pa = a.clone();
    Ok(Tensor::from_op(
        shape.to_vec(),
        a.to_vec(),
        vec![a.clone()],
        Box::new(move |g| pa.accumulate_grad(g)),
    ))
}

/// Elementwise max(0, x); the subgradient at exactly 0 is 0.
pub fn relu(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| x.max(0.0)).collect();
    let pa = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let x = pa.data();
            let gx: Vec<f64> = g
                .iter()
                .zip(x.iter())
                .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                .collect();
            drop(x);
            pa.accumulate_grad(&gx);
        }),
    )
}

/// Stack K same-shape tensors into a new leading axis of length K.
pub fn stack_rows(items: &[Tensor]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::contract("stack_rows", "empty input list"));
    }
    let base = items[0].shape().to_vec();
    for t in items {
        if t.shape() != base.as_slice() {
            return Err(Error::contract(
                "stack_rows",
                format!("shape {:?} vs {:?}", t.shape(), base),
            ));
        }
    }
    let chunk = items[0].numel();
    let mut data = Vec::with_capacity(chunk * items.len());
    for t in items {
        data.extend_from_slice(&t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(&base);
    let parents: Vec<Tensor> = items.to_vec();
    let closure_parents = parents.clone();
    Ok(Tensor::from_op(
        shape,
        data,
        parents,
        Box::new(move |g| {
            for (i, p) in closure_parents.iter().enumerate() {
                if p.requires_grad() {
                    p.accumulate_grad(&g[i * chunk..(i + 1) * chunk]);
                }
            }
        }),
    ))
}

/// Elementwise fusion of same-shape inputs. For `max`, the gradient routes to
/// the winning input; ties go to the lowest input index.
pub fn elementwise_fuse(inputs: &[Tensor], mode: FuseMode) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::contract("elementwise_fuse", "empty input list"));
    }
    let shape = inputs[0].shape().to_vec();
    for t in inputs {
        if t.shape() != shape.as_slice() {
            return Err(Error::contract(
                "elementwise_fuse",
                format!("shape {:?} vs {:?}", t.shape(), shape),
            ));
        }
    }
    let n = inputs[0].numel();
    let parents: Vec<Tensor> = inputs.to_vec();

    let out = match mode {
        FuseMode::Sum => {
            let mut data = inputs[0].to_vec();
            for t in &inputs[1..] {
                for (d, &v) in data.iter_mut().zip(t.data().iter()) {
                    *d += v;
                }
            }
            let ps = parents.clone();
            Tensor::from_op(
                shape,
                data,
                parents,
                Box::new(move |g| {
                    for p in &ps {
                        if p.requires_grad() {
                            p.accumulate_grad(g);
                        }
                    }
                }),
            )
        }
        FuseMode::Max => {
            let mut data = inputs[0].to_vec();
            let mut winner = vec![0u32; n];
            for (i, t) in inputs.iter().enumerate().skip(1) {
                for (e, (d, &v)) in data.iter_mut().zip(t.data().iter()).enumerate() {
                    if v > *d {
                        *d = v;
                        winner[e] = i as u32;
                    }
                }
            }
            let ps = parents.clone();
            Tensor::from_op(
                shape,
                data,
                parents,
                Box::new(move |g| {
                    for (i, p) in ps.iter().enumerate() {
                        if !p.requires_grad() {
                            continue;
                        }
                        let gx: Vec<f64> = g
                            .iter()
                            .zip(winner.iter())
                            .map(|(&gv, &w)| if w == i as u32 { gv } else { 0.0 })
                            .collect();
                        p.accumulate_grad(&gx);
                    }
                }),
            )
        }
        FuseMode::Product => {
            let mut data = inputs[0].to_vec();
            for t in &inputs[1..] {
                for (d, &v) in data.iter_mut().zip(t.data().iter()) {
                    *d *= v;
                }
            }
            let ps = parents.clone();
            Tensor::from_op(
                shape,
                data,
                parents,
                Box::new(move |g| {
                    for (i, p) in ps.iter().enumerate() {
                        if !p.requires_grad() {
                            continue;
                        }
                        // product of all other inputs, elementwise
                        let mut gx = g.to_vec();
                        for (j, q) in ps.iter().enumerate() {
                            if j != i {
                                for (gv, &v) in gx.iter_mut().zip(q.data().iter()) {
                                    *gv *= v;
                                }
                            }
                        }
                        p.accumulate_grad(&gx);
                    }
                }),
            )
        }
    };
    out.check_finite("elementwise_fuse")?;
    Ok(out)
}

/// 2d convolution over NCHW input with odd square-taps kernels.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::contract(
            "conv2d",
            format!("expected 4d input/weight, got {:?} / {:?}", xs, ws),
        ));
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin {
        return Err(Error::contract(
            "conv2d",
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::contract(
            "conv2d",
            format!("bias shape {:?}, expected [{cout}]", b.shape()),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::contract("conv2d", format!("kernel {kh}x{kw} must be odd")));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d", "stride must be positive"));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::contract(
            "conv2d",
            format!("input {h}x{wd} with pad {pad} smaller than kernel {kh}x{kw}"),
        ));
    }

    let geom = ConvShape::new(cin, h, wd, kh, kw, stride, pad);
    let (oh, ow) = (geom.oh, geom.ow);
    let ospatial = oh * ow;
    let k = geom.patch_len();

    let mut out = vec![0.0; n * cout * ospatial];
    {
        let xd = x.data();
        let wd_ = w.data();
        let bd = b.data();
        let mut col = vec![0.0; k * ospatial];
        for s in 0..n {
            im2col(&xd[s * cin * h * wd..(s + 1) * cin * h * wd], &geom, &mut col);
            let dst = &mut out[s * cout * ospatial..(s + 1) * cout * ospatial];
            mm(&wd_, &col, cout, k, ospatial, dst);
            for o in 0..cout {
                let bias = bd[o];
                for v in &mut dst[o * ospatial..(o + 1) * ospatial] {
                    *v += bias;
                }
            }
        }
    }

    let (px, pw, pb) = (x.clone(), w.clone(), b.clone());
    let t = Tensor::from_op(
        vec![n, cout, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let xd = px.data();
            let wd_ = pw.data();
            let mut col = vec![0.0; k * ospatial];
            let mut gw = if pw.requires_grad() {
                Some(vec![0.0; wd_.len()])
            } else {
                None
            };
            let mut gx = if px.requires_grad() {
                Some(vec![0.0; xd.len()])
            } else {
                None
            };
            let mut gcol = vec![0.0; k * ospatial];
            let mut gw_s = vec![0.0; wd_.len()];
            for s in 0..n {
                let gout = &g[s * cout * ospatial..(s + 1) * cout * ospatial];
                if gw.is_some() || gx.is_some() {
                    im2col(&xd[s * cin * h * wd..(s + 1) * cin * h * wd], &geom, &mut col);
                }
                if let Some(gw) = gw.as_mut() {
                    mm_abt(gout, &col, cout, ospatial, k, &mut gw_s);
                    for (a, &v) in gw.iter_mut().zip(&gw_s) {
                        *a += v;
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    mm_atb(&wd_, gout, cout, k, ospatial, &mut gcol);
                    col2im_add(&gcol, &geom, &mut gx[s * cin * h * wd..(s + 1) * cin * h * wd]);
                }
            }
            drop(xd);
            drop(wd_);
            if let Some(gx) = gx {
                px.accumulate_grad(&gx);
            }
            if let Some(gw) = gw {
                pw.accumulate_grad(&gw);
            }
            if pb.requires_grad() {
                let mut gb = vec![0.0; cout];
                for s in 0..n {
                    for o in 0..cout {
                        gb[o] += g[(s * cout + o) * ospatial..(s * cout + o + 1) * ospatial]
                            .iter()
                            .sum::<f64>();
                    }
                }
                pb.accumulate_grad(&gb);
            }
        }),
    );
    t.check_finite("conv2d")?;
    Ok(t)
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact x2 upsample).
/// Weight layout is `[Cin, Cout, 2, 2]`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    if stride != 2 {
        return Err(Error::config(
            "conv_transpose2d",
            format!("stride {stride}; only stride 2 is supported"),
        ));
    }
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || ws[2] != 2 || ws[3] != 2 {
        return Err(Error::config(
            "conv_transpose2d",
            format!("expected NCHW input and [Cin,Cout,2,2] weight, got {:?} / {:?}", xs, ws),
        ));
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    if ws[0] != cin {
        return Err(Error::contract(
            "conv_transpose2d",
            format!("input has {cin} channels, weight expects {}", ws[0]),
        ));
    }
    let cout = ws[1];
    if b.shape() != [cout] {
        return Err(Error::contract(
            "conv_transpose2d",
            format!("bias shape {:?}, expected [{cout}]", b.shape()),
        ));
    }
    let (oh, ow) = (2 * h, 2 * wd);

    // Stride equals kernel size, so each output cell has exactly one tap:
    // out[n,co,y,x] = sum_ci x[n,ci,y/2,x/2] * w[ci,co,y%2,x%2] + b[co]
    let mut out = vec![0.0; n * cout * oh * ow];
    {
        let xd = x.data();
        let wdat = w.data();
        let bd = b.data();
        for s in 0..n {
            for co in 0..cout {
                let dst = &mut out[(s * cout + co) * oh * ow..(s * cout + co + 1) * oh * ow];
                for y in 0..oh {
                    for xq in 0..ow {
                        let mut acc = bd[co];
                        let (iy, ix) = (y / 2, xq / 2);
                        let (ky, kx) = (y % 2, xq % 2);
                        for ci in 0..cin {
                            acc += xd[((s * cin + ci) * h + iy) * wd + ix]
                                * wdat[((ci * cout + co) * 2 + ky) * 2 + kx];
                        }
                        dst[y * ow + xq] = acc;
                    }
                }
            }
        }
    }

    let (px, pw, pb) = (x.clone(), w.clone(), b.clone());
    let t = Tensor::from_op(
        vec![n, cout, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let xd = px.data();
            let wdat = pw.data();
            if px.requires_grad() {
                let mut gx = vec![0.0; xd.len()];
                for s in 0..n {
                    for ci in 0..cin {
                        for iy in 0..h {
                            for ix in 0..wd {
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    for ky in 0..2 {
                                        for kx in 0..2 {
                                            acc += g[((s * cout + co) * oh + 2 * iy + ky) * ow
                                                + 2 * ix
                                                + kx]
                                                * wdat[((ci * cout + co) * 2 + ky) * 2 + kx];
                                        }
                                    }
                                }
                                gx[((s * cin + ci) * h + iy) * wd + ix] = acc;
                            }
                        }
                    }
                }
                px.accumulate_grad(&gx);
            }
            if pw.requires_grad() {
                let mut gw = vec![0.0; wdat.len()];
                for s in 0..n {
                    for ci in 0..cin {
                        for co in 0..cout {
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    let mut acc = 0.0;
                                    for iy in 0..h {
                                        for ix in 0..wd {
                                            acc += xd[((s * cin + ci) * h + iy) * wd + ix]
                                                * g[((s * cout + co) * oh + 2 * iy + ky) * ow
                                                    + 2 * ix
                                                    + kx];
                                        }
                                    }
                                    gw[((ci * cout + co) * 2 + ky) * 2 + kx] += acc;
                                }
                            }
                        }
                    }
                }
                pw.accumulate_grad(&gw);
            }
            drop(xd);
            drop(wdat);
            if pb.requires_grad() {
                let mut gb = vec![0.0; cout];
                for s in 0..n {
                    for co in 0..cout {
                        gb[co] += g[(s * cout + co) * oh * ow..(s * cout + co + 1) * oh * ow]
                            .iter()
                            .sum::<f64>();
                    }
                }
                pb.accumulate_grad(&gb);
            }
        }),
    );
    t.check_finite("conv_transpose2d")?;
    Ok(t)
}

/// Affine map y = x w^T + b with w stored `[Dout, Din]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 {
        return Err(Error::contract(
            "linear",
            format!("expected 2d input/weight, got {:?} / {:?}", xs, ws),
        ));
    }
    let (n, din) = (xs[0], xs[1]);
    let (dout, wdin) = (ws[0], ws[1]);
    if wdin != din {
        return Err(Error::contract(
            "linear",
            format!("input features {din}, weight expects {wdin}"),
        ));
    }
    if b.shape() != [dout] {
        return Err(Error::contract(
            "linear",
            format!("bias shape {:?}, expected [{dout}]", b.shape()),
        ));
    }

    let mut out = vec![0.0; n * dout];
    {
        let xd = x.data();
        let wd = w.data();
        let bd = b.data();
        mm_abt(&xd, &wd, n, din, dout, &mut out);
        for row in out.chunks_exact_mut(dout) {
            for (v, &bias) in row.iter_mut().zip(bd.iter()) {
                *v += bias;
            }
        }
    }

    let (px, pw, pb) = (x.clone(), w.clone(), b.clone());
    let t = Tensor::from_op(
        vec![n, dout],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            if px.requires_grad() {
                let wd = pw.data();
                let mut gx = vec![0.0; n * din];
                mm(g, &wd, n, dout, din, &mut gx);
                drop(wd);
                px.accumulate_grad(&gx);
            }
            if pw.requires_grad() {
                let xd = px.data();
                let mut gw = vec![0.0; dout * din];
                mm_atb(g, &xd, n, dout, din, &mut gw);
                drop(xd);
                pw.accumulate_grad(&gw);
            }
            if pb.requires_grad() {
                let mut gb = vec![0.0; dout];
                for row in g.chunks_exact(dout) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                pb.accumulate_grad(&gb);
            }
        }),
    );
    t.check_finite("linear")?;
    Ok(t)
}

/// Bilinear interpolation of a `[C,H,W]` map at one continuous point, with
/// pixel centers at integer coordinates and zero padding outside the map.
/// Differentiable with respect to the map.
pub fn bilinear_sample(map: &Tensor, y: f64, x: f64) -> Tensor {
    let ms = map.shape();
    assert_eq!(ms.len(), 3, "bilinear_sample expects [C,H,W]");
    let (c, h, w) = (ms[0], ms[1], ms[2]);
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (iy, ix) = (y0 as i64, x0 as i64);

    // (row, col, weight) for the up-to-4 in-bounds neighbors
    let mut taps: Vec<(usize, usize, f64)> = Vec::with_capacity(4);
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let (py, px) = (iy + dy, ix + dx);
            let weight = wy * wx;
            if weight != 0.0 && py >= 0 && py < h as i64 && px >= 0 && px < w as i64 {
                taps.push((py as usize, px as usize, weight));
            }
        }
    }

    let mut out = vec![0.0; c];
    {
        let md = map.data();
        for ch in 0..c {
            let plane = &md[ch * h * w..(ch + 1) * h * w];
            out[ch] = taps.iter().map(|&(py, px, wt)| wt * plane[py * w + px]).sum();
        }
    }

    let pm = map.clone();
    Tensor::from_op(
        vec![c],
        out,
        vec![map.clone()],
        Box::new(move |g| {
            let mut gm = vec![0.0; c * h * w];
            for ch in 0..c {
                let plane = &mut gm[ch * h * w..(ch + 1) * h * w];
                for &(py, px, wt) in &taps {
                    plane[py * w + px] += wt * g[ch];
                }
            }
            pm.accumulate_grad(&gm);
        }),
    )
}

/// Add / max / multiply a `[N,1,H,W]` map into every channel of `[N,C,H,W]`.
/// For `max` ties the first operand wins the gradient.
pub fn fuse_broadcast(a: &Tensor, fg: &Tensor, mode: FuseMode) -> Result<Tensor> {
    let ash = a.shape();
    let fsh = fg.shape();
    if ash.len() != 4 || fsh.len() != 4 || fsh[1] != 1 || ash[0] != fsh[0]
        || ash[2] != fsh[2] || ash[3] != fsh[3]
    {
        return Err(Error::contract(
            "fuse_broadcast",
            format!("shape {:?} vs {:?}", ash, fsh),
        ));
    }
    let (n, c, h, w) = (ash[0], ash[1], ash[2], ash[3]);
    let spatial = h * w;
    let mut out = vec![0.0; n * c * spatial];
    let mut fg_wins = vec![false; n * c * spatial];
    {
        let ad = a.data();
        let fd = fg.data();
        for s in 0..n {
            let fplane = &fd[s * spatial..(s + 1) * spatial];
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for e in 0..spatial {
                    let (av, fv) = (ad[base + e], fplane[e]);
                    out[base + e] = match mode {
                        FuseMode::Sum => av + fv,
                        FuseMode::Product => av * fv,
                        FuseMode::Max => {
                            if fv > av {
                                fg_wins[base + e] = true;
                                fv
                            } else {
                                av
                            }
                        }
                    };
                }
            }
        }
    }

    let (pa, pf) = (a.clone(), fg.clone());
    let t = Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![a.clone(), fg.clone()],
        Box::new(move |g| {
            let ad = pa.data();
            let fd = pf.data();
            let mut ga = vec![0.0; n * c * spatial];
            let mut gf = vec![0.0; n * spatial];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    for e in 0..spatial {
                        let gv = g[base + e];
                        match mode {
                            FuseMode::Sum => {
                                ga[base + e] = gv;
                                gf[s * spatial + e] += gv;
                            }
                            FuseMode::Product => {
                                ga[base + e] = gv * fd[s * spatial + e];
                                gf[s * spatial + e] += gv * ad[base + e];
                            }
                            FuseMode::Max => {
                                if fg_wins[base + e] {
                                    gf[s * spatial + e] += gv;
                                } else {
                                    ga[base + e] = gv;
                                }
                            }
                        }
                    }
                }
            }
            drop(ad);
            drop(fd);
            if pa.requires_grad() {
                pa.accumulate_grad(&ga);
            }
            if pf.requires_grad() {
                pf.accumulate_grad(&gf);
            }
        }),
    );
    t.check_finite("fuse_broadcast")?;
    Ok(t)
}

/// Gradient sink for composite ops defined outside this crate (losses in the
/// harness). Must only be called from a backward closure installed via
/// `Tensor::from_op`, with `t` one of that op's parents.
pub fn accumulate_into(t: &Tensor, g: &[f64]) {
    t.accumulate_grad(g);
}
