//! Dense 2D grids and 3D/4D tensors used as image and volume storage.
//!
//! Layouts are row-major with width as the fastest axis. All containers are
//! plain owned buffers; sharing across threads is read-only by construction.

/// A dense 2D grid indexed by `(x, y)` with `x` the fastest axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> Option<T> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            None
        } else {
            Some(self.data[y as usize * self.width + x as usize])
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn rows_mut(&mut self) -> std::slice::ChunksMut<'_, T> {
        self.data.chunks_mut(self.width)
    }

    /// Iterate `(x, y, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, &v)| (i % w, i / w, v))
    }
}

impl Grid<f64> {
    /// Bilinear sample at continuous coordinates with the pixel-center
    /// convention (integer coordinate = pixel center). Returns `None`
    /// outside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return None;
        }
        let x0 = x.floor().min((self.width - 2).max(0) as f64) as usize;
        let y0 = y.floor().min((self.height - 2).max(0) as f64) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.at(x0, y0);
        let v10 = self.at(x1, y0);
        let v01 = self.at(x0, y1);
        let v11 = self.at(x1, y1);
        let v0 = v00 * (1.0 - fx) + v10 * fx;
        let v1 = v01 * (1.0 - fx) + v11 * fx;
        Some(v0 * (1.0 - fy) + v1 * fy)
    }

    /// 2x downsampling by 2x2 area averaging. Requires even dimensions.
    pub fn downsample_half(&self) -> Grid<f64> {
        assert!(self.width % 2 == 0 && self.height % 2 == 0);
        Grid::from_fn(self.width / 2, self.height / 2, |x, y| {
            0.25 * (self.at(2 * x, 2 * y)
                + self.at(2 * x + 1, 2 * y)
                + self.at(2 * x, 2 * y + 1)
                + self.at(2 * x + 1, 2 * y + 1))
        })
    }
}

/// A dense 3D tensor with shape `(planes, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    planes: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Tensor3<T> {
    pub fn filled(planes: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            planes,
            height,
            width,
            data: vec![value; planes * height * width],
        }
    }

    #[inline]
    pub fn planes(&self) -> usize {
        self.planes
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.planes, self.height, self.width)
    }

    #[inline]
    fn idx(&self, d: usize, y: usize, x: usize) -> usize {
        debug_assert!(d < self.planes && y < self.height && x < self.width);
        (d * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize) -> T {
        self.data[self.idx(d, y, x)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, y: usize, x: usize, value: T) {
        let i = self.idx(d, y, x);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Mutable per-plane slices, one `(height * width)` chunk per plane.
    pub fn plane_chunks_mut(&mut self) -> std::slice::ChunksMut<'_, T> {
        self.data.chunks_mut(self.height * self.width)
    }

    pub fn plane(&self, d: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[d * n..(d + 1) * n]
    }
}

/// A dense 4D tensor with shape `(channels, planes, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    channels: usize,
    planes: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Tensor4<T> {
    pub fn filled(channels: usize, planes: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            planes,
            height,
            width,
            data: vec![value; channels * planes * height * width],
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn planes(&self) -> usize {
        self.planes
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn idx(&self, c: usize, d: usize, y: usize, x: usize) -> usize {
        debug_assert!(
            c < self.channels && d < self.planes && y < self.height && x < self.width
        );
        ((c * self.planes + d) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, d: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, d, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, d: usize, y: usize, x: usize, value: T) {
        let i = self.idx(c, d, y, x);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}
