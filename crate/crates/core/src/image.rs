//! Dense row-major pixel grids.

use nalgebra::Vector3;

use crate::error::{invalid, Result};

/// A `width x height` grid stored row-major; pixel `(x, y)` is at
/// `y * width + x` and its center is `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type RgbImage = Grid<[f64; 3]>;
pub type ScalarMap = Grid<f64>;
pub type Mask = Grid<bool>;
pub type NormalMap = Grid<Vector3<f64>>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return invalid(format!(
                "grid data has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            ));
        }
        Ok(Grid { width, height, data })
    }

    pub fn map<U, F: Fn(&T) -> U>(&self, f: F) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn xy(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_size<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if !self.same_size(other) {
            return invalid(format!(
                "{what}: size {}x{} does not match {}x{}",
                other.width, other.height, self.width, self.height
            ));
        }
        Ok(())
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// Indices of set pixels in row-major order.
    pub fn indices(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
    }

    /// 4-neighbor dilation, `radius` times.
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut cur = self.clone();
        for _ in 0..radius {
            let mut next = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if cur.data[cur.idx(x, y)] {
                        continue;
                    }
                    let hit = (x > 0 && *cur.get(x - 1, y))
                        || (x + 1 < self.width && *cur.get(x + 1, y))
                        || (y > 0 && *cur.get(x, y - 1))
                        || (y + 1 < self.height && *cur.get(x, y + 1));
                    let i = cur.idx(x, y);
                    next.data[i] = hit;
                }
            }
            cur = next;
        }
        cur
    }
}

/// In-bounds 4-neighbors of pixel `i`.
pub fn neighbors4(width: usize, height: usize, i: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % width, i / width);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < width).then(|| i + 1),
        (y > 0).then(|| i - width),
        (y + 1 < height).then(|| i + width),
    ]
    .into_iter()
    .flatten()
}

/// Bilinear sample at continuous pixel coordinates, where pixel `(x, y)`
/// has its center at `(x + 0.5, y + 0.5)`. Coordinates are clamped to the
/// grid.
pub fn bilinear(map: &ScalarMap, px: f64, py: f64) -> f64 {
    let u = (px - 0.5).clamp(0.0, (map.width - 1) as f64);
    let v = (py - 0.5).clamp(0.0, (map.height - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(map.width - 1), (y0 + 1).min(map.height - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let top = map.get(x0, y0) * (1.0 - fx) + map.get(x1, y0) * fx;
    let bot = map.get(x0, y1) * (1.0 - fx) + map.get(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Root-mean-square difference over all masked pixels and channels.
pub fn masked_rmse(a: &RgbImage, b: &RgbImage, mask: &Mask) -> Result<f64> {
    a.check_size(b, "rmse")?;
    a.check_size(mask, "rmse mask")?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..a.len() {
        if mask.data[i] {
            for c in 0..3 {
                acc += (a.data[i][c] - b.data[i][c]).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(crate::Error::EmptyRegion("rmse over empty mask".into()));
    }
    Ok((acc / n as f64).sqrt())
}
