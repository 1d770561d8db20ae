use crate::error::{Error, Result};

/// Reserved label excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids of one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn flip_w(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Nearest-neighbour resize using pixel centres.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!("cannot resize labels to {out_h}x{out_w}")));
        }
        let pick = |src: usize, dst: usize, d: usize| {
            (((d as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
        };
        let mut data = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = pick(self.height, out_h, y);
            data.extend((0..out_w).map(|x| self.get(sy, pick(self.width, out_w, x))));
        }
        Self::new(out_h, out_w, data)
    }

    /// Checks every non-ignored label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&v| v != IGNORE && v as usize >= classes)
        {
            Some(i) => Err(Error::Input(format!(
                "label {} at pixel {i} outside 0..{classes}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}
