use crate::autodiff::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn3([3, self.height, self.width], |c, y, x| {
            self.pixels[(y * self.width + x) * 3 + c] as f64 / 255.0
        })
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding and clamping.
    pub fn from_tensor(t: &Tensor) -> Self {
        let (_, h, w) = t.dims3().expect("image tensor is [3, H, W]");
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| (t.at3(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                img.put(x, y, px);
            }
        }
        img
    }

    /// One-pixel rectangle outline, clipped to the image.
    pub fn draw_rect(&mut self, b: [f64; 4], rgb: [u8; 3]) {
        if self.width == 0 || self.height == 0 {
            return;
        }
        let clamp_x = |v: f64| (v.max(0.0) as usize).min(self.width - 1);
        let clamp_y = |v: f64| (v.max(0.0) as usize).min(self.height - 1);
        let (x0, y0) = (clamp_x(b[0]), clamp_y(b[1]));
        let (x1, y1) = (clamp_x(b[2] - 1.0), clamp_y(b[3] - 1.0));
        for x in x0..=x1.max(x0) {
            self.put(x, y0, rgb);
            self.put(x, y1.max(y0), rgb);
        }
        for y in y0..=y1.max(y0) {
            self.put(x0, y, rgb);
            self.put(x1.max(x0), y, rgb);
        }
    }
}
