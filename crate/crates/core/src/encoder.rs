//! Small fully-convolutional descriptor network with exact reverse-mode
//! gradients.
//!
//! Recipe: conv3×3 3→16 /2, ReLU, conv3×3 16→32 /2, ReLU, conv3×3 32→32, ReLU,
//! conv1×1 32→D, bilinear ×4 upsampling, per-pixel L2 normalization.
//! Feature maps are stored channel-major (`C × H × W`).

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;
use crate::scalar::{matmul, Mat, Scalar};

/// Added to the descriptor norm before dividing.
pub const NORM_EPS: f64 = 1e-8;
/// Total downsampling of the convolution stack.
pub const STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    const fn new(out_channels: usize, in_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

pub fn recipe(dim: usize) -> [ConvShape; 4] {
    [
        ConvShape::new(16, 3, 3, 2),
        ConvShape::new(32, 16, 3, 2),
        ConvShape::new(32, 32, 3, 1),
        ConvShape::new(dim, 32, 1, 1),
    ]
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// All weights and biases in one flat buffer: per layer, weights
/// (`out × in × k × k`) then biases.
#[derive(Debug)]
pub struct EncoderParams<T> {
    dim: usize,
    shapes: [ConvShape; 4],
    values: Vec<T>,
    version: u64,
}

impl<T: Clone> Clone for EncoderParams<T> {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            shapes: self.shapes,
            values: self.values.clone(),
            version: fresh_version(),
        }
    }
}

impl<T: PartialEq> PartialEq for EncoderParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.shapes == other.shapes && self.values == other.values
    }
}

impl<T: Scalar> EncoderParams<T> {
    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init(dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(dim)?;
        let shapes = p.shapes;
        let mut offset = 0;
        for s in &shapes {
            let fan_in = (s.in_channels * s.kernel * s.kernel) as f64;
            let fan_out = (s.out_channels * s.kernel * s.kernel) as f64;
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            for w in &mut p.values[offset..offset + s.weight_len()] {
                *w = T::lit(rng.uniform(-a, a));
            }
            offset += s.param_len();
        }
        Ok(p)
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParam(format!("descriptor dim must be >= 2, got {dim}")));
        }
        let shapes = recipe(dim);
        let n = shapes.iter().map(|s| s.param_len()).sum();
        Ok(Self {
            dim,
            shapes,
            values: vec![T::zero(); n],
            version: fresh_version(),
        })
    }

    pub fn from_values(dim: usize, values: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(dim)?;
        if values.len() != p.values.len() {
            return Err(Error::DimMismatch(format!(
                "encoder with D={dim} has {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shapes(&self) -> &[ConvShape; 4] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Mutable access; invalidates caches from earlier forward passes.
    pub fn values_mut(&mut self) -> &mut [T] {
        self.version = fresh_version();
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            dim: self.dim,
            shapes: self.shapes,
            values: self
                .values
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
            version: fresh_version(),
        }
    }

    fn layer(&self, l: usize) -> (&[T], &[T]) {
        let off: usize = self.shapes[..l].iter().map(|s| s.param_len()).sum();
        let s = &self.shapes[l];
        let w = &self.values[off..off + s.weight_len()];
        let b = &self.values[off + s.weight_len()..off + s.param_len()];
        (w, b)
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.shapes[..l].iter().map(|s| s.param_len()).sum()
    }
}

/// `H × W` grid of D-vectors, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorImage<T> {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> DescriptorImage<T> {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::DimMismatch(format!(
                "descriptor image {width}x{height}x{dim} needs {} values, got {}",
                width * height * dim,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn descriptor(&self, u: usize, v: usize) -> &[T] {
        let i = (v * self.width + u) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn in_bounds(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height
    }
}

/// Activations retained from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    version: u64,
    width: usize,
    height: usize,
    /// im2col matrices of the three 3×3 layers
    cols: [Vec<T>; 3],
    /// post-ReLU outputs of the three hidden layers
    acts: [Vec<T>; 3],
    /// pre-upsampling output, `D × fh × fw`
    features: Vec<T>,
    fh: usize,
    fw: usize,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn features(&self) -> (&[T], usize, usize) {
        (&self.features, self.fh, self.fw)
    }

    /// Post-ReLU output of hidden layer `layer` (0..3).
    pub fn hidden(&self, layer: usize) -> &[T] {
        &self.acts[layer]
    }
}

fn im2col<T: Scalar>(input: &[T], h: usize, w: usize, s: &ConvShape) -> (Vec<T>, usize, usize) {
    let (ho, wo) = (s.out_size(h), s.out_size(w));
    let n = ho * wo;
    let k = s.kernel;
    let mut cols = vec![T::zero(); s.patch_len() * n];
    for c in 0..s.in_channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, s: &ConvShape) -> Vec<T> {
    let (ho, wo) = (s.out_size(h), s.out_size(w));
    let n = ho * wo;
    let k = s.kernel;
    let mut out = vec![T::zero(); s.in_channels * h * w];
    for c in 0..s.in_channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bilinear taps for upsampling `in_len` samples by `factor`, half-pixel
/// centers, clamped at the border.
fn upsample_taps<T: Scalar>(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    (0..out_len)
        .map(|x| {
            let src = ((x as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let f = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, T::lit(1.0 - f), T::lit(f))
        })
        .collect()
}

fn conv_forward<T: Scalar>(
    w: &[T],
    b: &[T],
    cols: &[T],
    s: &ConvShape,
    n: usize,
    relu: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); s.out_channels * n];
    for (row, &bias) in out.chunks_exact_mut(n).zip(b) {
        row.iter_mut().for_each(|x| *x = bias);
    }
    matmul(
        Mat::new(w, s.out_channels, s.patch_len()),
        Mat::new(cols, s.patch_len(), n),
        &mut out,
        T::one(),
    );
    if relu {
        for x in &mut out {
            if !(*x > T::zero()) {
                *x = T::zero();
            }
        }
    }
    out
}

fn image_to_chw<T: Scalar>(img: &Image) -> Vec<T> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = vec![T::zero(); c * h * w];
    for (i, px) in img.data().chunks_exact(c).enumerate() {
        for (ch, &x) in px.iter().enumerate() {
            out[ch * h * w + i] = T::lit(x as f64);
        }
    }
    out
}

pub fn forward<T: Scalar>(
    params: &EncoderParams<T>,
    img: &Image,
) -> Result<(DescriptorImage<T>, ForwardCache<T>)> {
    let (w, h) = (img.width(), img.height());
    if img.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            actual: img.channels(),
        });
    }
    if w % STRIDE != 0 || h % STRIDE != 0 || w == 0 || h == 0 {
        return Err(Error::DimMismatch(format!(
            "input {w}x{h} must be a nonzero multiple of {STRIDE} in each dimension"
        )));
    }
    let shapes = params.shapes;
    let mut x = image_to_chw::<T>(img);
    let (mut ch, mut cw) = (h, w);
    let mut cols: [Vec<T>; 3] = Default::default();
    let mut acts: [Vec<T>; 3] = Default::default();
    for l in 0..3 {
        let (wt, b) = params.layer(l);
        let (c, ho, wo) = im2col(&x, ch, cw, &shapes[l]);
        x = conv_forward(wt, b, &c, &shapes[l], ho * wo, true);
        cols[l] = c;
        acts[l] = x.clone();
        ch = ho;
        cw = wo;
    }
    let (wt, b) = params.layer(3);
    let features = conv_forward(wt, b, &x, &shapes[3], ch * cw, false);
    let cache = ForwardCache {
        version: params.version,
        width: w,
        height: h,
        cols,
        acts,
        features,
        fh: ch,
        fw: cw,
    };
    let desc = upsample_normalize(&cache, params.dim);
    Ok((desc, cache))
}

/// Descriptor image without retaining activations.
pub fn describe<T: Scalar>(params: &EncoderParams<T>, img: &Image) -> Result<DescriptorImage<T>> {
    forward(params, img).map(|(d, _)| d)
}

fn upsample_normalize<T: Scalar>(cache: &ForwardCache<T>, dim: usize) -> DescriptorImage<T> {
    let (w, h, fw, fh) = (cache.width, cache.height, cache.fw, cache.fh);
    let tx = upsample_taps::<T>(w, fw, STRIDE);
    let ty = upsample_taps::<T>(h, fh, STRIDE);
    let f = &cache.features;
    let plane = fh * fw;
    let eps = T::lit(NORM_EPS);
    let mut data = vec![T::zero(); w * h * dim];
    for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (x, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let d = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for (c, out) in d.iter_mut().enumerate() {
                let p = &f[c * plane..(c + 1) * plane];
                *out = wy0 * (wx0 * p[y0 * fw + x0] + wx1 * p[y0 * fw + x1])
                    + wy1 * (wx0 * p[y1 * fw + x0] + wx1 * p[y1 * fw + x1]);
            }
            let norm = d.iter().map(|&v| v * v).sum::<T>().sqrt();
            let inv = T::one() / (norm + eps);
            d.iter_mut().for_each(|v| *v *= inv);
        }
    }
    DescriptorImage {
        width: w,
        height: h,
        dim,
        data,
    }
}

/// Gradient of `x / (‖x‖ + ε)` applied to the upstream gradient `g`.
pub fn normalize_backward<T: Scalar>(x: &[T], g: &[T], out: &mut [T]) {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let denom = n + T::lit(NORM_EPS);
    let xg: T = x.iter().zip(g).map(|(&a, &b)| a * b).sum();
    let coef = if n > T::zero() {
        xg / (n * denom * denom)
    } else {
        T::zero()
    };
    for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
        *o = gi / denom - xi * coef;
    }
}

/// Parameter gradients for upstream gradients on the normalized descriptors
/// at `pixels` (`grads` holds one D-vector per pixel). Accumulates into
/// `out`, which must have `params.len()` entries.
pub fn backward_into<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &ForwardCache<T>,
    pixels: &[(u32, u32)],
    grads: &[T],
    out: &mut [T],
) -> Result<()> {
    if cache.version != params.version {
        return Err(Error::StaleCache("parameters changed since the forward pass"));
    }
    let dim = params.dim;
    if grads.len() != pixels.len() * dim || out.len() != params.len() {
        return Err(Error::DimMismatch("gradient buffer sizes".into()));
    }
    let (w, h, fw, fh) = (cache.width, cache.height, cache.fw, cache.fh);
    let tx = upsample_taps::<T>(w, fw, STRIDE);
    let ty = upsample_taps::<T>(h, fh, STRIDE);
    let plane = fh * fw;
    let f = &cache.features;

    // normalization and upsampling, only at the sampled pixels
    let mut d_feat = vec![T::zero(); dim * plane];
    let mut pre = vec![T::zero(); dim];
    let mut g_pre = vec![T::zero(); dim];
    for (i, &(u, v)) in pixels.iter().enumerate() {
        let (u, v) = (u as usize, v as usize);
        if u >= w || v >= h {
            return Err(Error::OutOfBounds {
                u: u as i64,
                v: v as i64,
                width: w,
                height: h,
            });
        }
        let (y0, y1, wy0, wy1) = ty[v];
        let (x0, x1, wx0, wx1) = tx[u];
        let taps = [
            (y0 * fw + x0, wy0 * wx0),
            (y0 * fw + x1, wy0 * wx1),
            (y1 * fw + x0, wy1 * wx0),
            (y1 * fw + x1, wy1 * wx1),
        ];
        for (c, p) in pre.iter_mut().enumerate() {
            *p = taps
                .iter()
                .fold(T::zero(), |acc, &(j, wt)| acc + wt * f[c * plane + j]);
        }
        normalize_backward(&pre, &grads[i * dim..(i + 1) * dim], &mut g_pre);
        for (c, &g) in g_pre.iter().enumerate() {
            for &(j, wt) in &taps {
                d_feat[c * plane + j] += wt * g;
            }
        }
    }

    let shapes = params.shapes;
    let mut dz = d_feat;
    for l in (0..4).rev() {
        let s = &shapes[l];
        let n = if l == 3 { plane } else { cache.acts[l].len() / s.out_channels };
        let input: &[T] = if l == 3 { &cache.acts[2] } else { &cache.cols[l] };
        let off = params.layer_offset(l);
        let (dw, rest) = out[off..off + s.param_len()].split_at_mut(s.weight_len());
        // dW += dZ · colsᵀ
        matmul(
            Mat::new(&dz, s.out_channels, n),
            Mat::new(input, s.patch_len(), n).t(),
            dw,
            T::one(),
        );
        for (db, row) in rest.iter_mut().zip(dz.chunks_exact(n)) {
            *db += row.iter().copied().sum::<T>();
        }
        if l == 0 {
            break;
        }
        let (wt, _) = params.layer(l);
        let mut dcols = vec![T::zero(); s.patch_len() * n];
        matmul(
            Mat::new(wt, s.out_channels, s.patch_len()).t(),
            Mat::new(&dz, s.out_channels, n),
            &mut dcols,
            T::zero(),
        );
        let mut dx = if l == 3 {
            dcols
        } else {
            let prev = cache.acts[l - 1].len() / s.in_channels;
            // input spatial dims of layer l are the output dims of layer l-1
            let (ih, iw) = input_dims(cache, l, prev);
            col2im(&dcols, ih, iw, s)
        };
        for (d, &a) in dx.iter_mut().zip(&cache.acts[l - 1]) {
            if !(a > T::zero()) {
                *d = T::zero();
            }
        }
        dz = dx;
    }
    Ok(())
}

fn input_dims<T>(cache: &ForwardCache<T>, l: usize, plane: usize) -> (usize, usize) {
    // hidden layer outputs: layer 0 → H/2, layers 1,2 → H/4
    let (h, w) = match l {
        1 => (cache.height / 2, cache.width / 2),
        _ => (cache.fh, cache.fw),
    };
    debug_assert_eq!(h * w, plane);
    (h, w)
}

pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &ForwardCache<T>,
    pixels: &[(u32, u32)],
    grads: &[T],
) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); params.len()];
    backward_into(params, cache, pixels, grads, &mut out)?;
    Ok(out)
}

const MAGIC: &[u8; 4] = b"DSCR";
const FORMAT_VERSION: u32 = 1;

/// Header: magic, version, D, layer count, then `out, in, kernel, stride`
/// per layer; body: little-endian f32 parameters in layer order.
pub fn checkpoint_bytes(params: &EncoderParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 16 * 4 + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.dim as u32).to_le_bytes());
    out.extend_from_slice(&(params.shapes.len() as u32).to_le_bytes());
    for s in &params.shapes {
        for d in [s.out_channels, s.in_channels, s.kernel, s.stride] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<EncoderParams<f32>> {
    let mut pos = 0;
    let mut word = || -> Result<u32> {
        let b = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a descriptor checkpoint (bad magic)".into()));
    }
    word()?;
    let version = word()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dim = word()? as usize;
    let layers = word()? as usize;
    let expected = recipe(dim);
    if layers != expected.len() {
        return Err(Error::Format(format!("expected 4 layers, found {layers}")));
    }
    for s in &expected {
        let dims = [word()?, word()?, word()?, word()?];
        if dims != [s.out_channels, s.in_channels, s.kernel, s.stride].map(|d| d as u32) {
            return Err(Error::Format(format!("layer dims {dims:?} do not match the recipe")));
        }
    }
    let body = &bytes[pos..];
    let n: usize = expected.iter().map(|s| s.param_len()).sum();
    if body.len() != 4 * n {
        return Err(Error::Format(format!(
            "checkpoint body has {} bytes, expected {}",
            body.len(),
            4 * n
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EncoderParams::from_values(dim, values)
}

pub fn save_checkpoint(params: &EncoderParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed, 0);
        Image::from_fn(w, h, 3, |_, _, _| rng.uniform(0.0, 1.0) as f32)
    }

    #[test]
    fn init_has_zero_bias_and_is_reproducible() {
        let a = EncoderParams::<f32>::init(16, &mut Rng::new(1, 0)).unwrap();
        let b = EncoderParams::<f32>::init(16, &mut Rng::new(1, 0)).unwrap();
        assert_eq!(a.values(), b.values());
        for l in 0..4 {
            let (_, bias) = a.layer(l);
            assert!(bias.iter().all(|&x| x == 0.0));
        }
        assert!(EncoderParams::<f32>::init(1, &mut Rng::new(1, 0)).is_err());
    }

    #[test]
    fn init_variance_matches_uniform_law() {
        // layer 3: 32 → 32, 3×3
        let fan = (32.0 * 9.0) * 2.0;
        let expected = 2.0 / fan;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for seed in 0..10 {
            let p = EncoderParams::<f64>::init(16, &mut Rng::new(seed, 0)).unwrap();
            for &w in p.layer(2).0 {
                sum += w;
                sq += w * w;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        assert!((var - expected).abs() / expected < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn output_shape_and_unit_norm() {
        let p = EncoderParams::<f32>::init(8, &mut Rng::new(2, 0)).unwrap();
        let img = test_image(24, 16, 3);
        let (d, _) = forward(&p, &img).unwrap();
        assert_eq!((d.width(), d.height(), d.dim()), (24, 16, 8));
        for v in 0..16 {
            for u in 0..24 {
                let n: f32 = d.descriptor(u, v).iter().map(|x| x * x).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_dims() {
        let p = EncoderParams::<f32>::init(4, &mut Rng::new(2, 0)).unwrap();
        assert!(forward(&p, &test_image(10, 8, 0)).is_err());
        assert!(forward(&p, &Image::zeros(8, 8, 1)).is_err());
    }

    #[test]
    fn zero_network_is_safe() {
        let p = EncoderParams::<f32>::zeros(4).unwrap();
        let (d, cache) = forward(&p, &test_image(8, 8, 1)).unwrap();
        assert!(cache.features.iter().all(|&x| x == 0.0));
        assert!(d.data().iter().all(|x| x.is_finite() && x.abs() <= 1e-6));
    }

    #[test]
    fn forward_is_deterministic() {
        let p = EncoderParams::<f32>::init(16, &mut Rng::new(5, 0)).unwrap();
        let img = test_image(32, 32, 9);
        assert_eq!(describe(&p, &img).unwrap(), describe(&p, &img).unwrap());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let p = EncoderParams::<f64>::init(3, &mut Rng::new(5, 0)).unwrap();
        let (_, cache) = forward(&p, &test_image(8, 8, 2)).unwrap();
        let g = backward(&p, &cache, &[(1, 2), (5, 5)], &[0.0; 6]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stale_cache_detected() {
        let mut p = EncoderParams::<f64>::init(3, &mut Rng::new(5, 0)).unwrap();
        let (_, cache) = forward(&p, &test_image(8, 8, 2)).unwrap();
        p.values_mut()[0] += 1.0;
        assert!(matches!(
            backward(&p, &cache, &[(0, 0)], &[1.0, 0.0, 0.0]),
            Err(Error::StaleCache(_))
        ));
        let other = p.clone();
        assert!(backward(&other, &cache, &[(0, 0)], &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn normalization_gradient_is_orthogonal() {
        let mut rng = Rng::new(8, 8);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let g: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut out = vec![0.0; 5];
            normalize_backward(&x, &g, &mut out);
            let dot: f64 = x.iter().zip(&out).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-8, "{dot}");
        }
    }

    #[test]
    fn translation_covariance_of_features() {
        let p = EncoderParams::<f64>::init(4, &mut Rng::new(3, 0)).unwrap();
        let big = test_image(36, 32, 4);
        let a = Image::from_fn(32, 32, 3, |u, v, c| big.get(u, v, c));
        let b = Image::from_fn(32, 32, 3, |u, v, c| big.get(u + 4, v, c));
        let (_, ca) = forward(&p, &a).unwrap();
        let (_, cb) = forward(&p, &b).unwrap();
        let (fa, fh, fw) = ca.features();
        let (fb, _, _) = cb.features();
        // stay clear of the zero-padded border (receptive field 15 px)
        for c in 0..4 {
            for y in 2..fh - 2 {
                for x in 2..fw - 3 {
                    let va = fa[c * fh * fw + y * fw + x + 1];
                    let vb = fb[c * fh * fw + y * fw + x];
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = EncoderParams::<f32>::init(16, &mut Rng::new(1, 1)).unwrap();
        let bytes = checkpoint_bytes(&p);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        let header = 16 + 4 * 16;
        let params: usize = recipe(16).iter().map(|s| s.param_len()).sum();
        assert_eq!(bytes.len(), header + 4 * params);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(_))));
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(checkpoint_from_bytes(&bytes[..10]).is_err());
    }
}
