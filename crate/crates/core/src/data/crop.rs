use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where to cut square patches out of an aligned face image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropSpec {
    /// (row, col) centers, one per local stream.
    pub anchors: Vec<(usize, usize)>,
    pub patch_size: usize,
    pub face_size: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self::five_point(224, 56)
    }
}

impl CropSpec {
    /// Two upper, one central and two lower anchors, laid out on a quarter grid.
    pub fn five_point(face_size: usize, patch_size: usize) -> Self {
        let half = patch_size / 2;
        let lo = half;
        let hi = face_size.saturating_sub(patch_size - half);
        let place = |v: usize| v.clamp(lo, hi.max(lo));
        let (q1, q2, q3) = (face_size / 4, face_size / 2, 3 * face_size / 4);
        let anchors = vec![
            (place(q1), place(q1)),
            (place(q1), place(q3)),
            (place(q2), place(q2)),
            (place(q3), place(q1)),
            (place(q3), place(q3)),
        ];
        Self {
            anchors,
            patch_size,
            face_size,
        }
    }

    /// Top-left corner of the window centered at `anchor`, if it fits.
    pub fn window(&self, anchor: (usize, usize), height: usize, width: usize) -> Result<(usize, usize)> {
        let half = self.patch_size / 2;
        let (r, c) = anchor;
        let err = || Error::Bounds {
            row: r,
            col: c,
            size: self.patch_size,
            height,
            width,
        };
        let top = r.checked_sub(half).ok_or_else(err)?;
        let left = c.checked_sub(half).ok_or_else(err)?;
        if top + self.patch_size > height || left + self.patch_size > width {
            return Err(err());
        }
        Ok((top, left))
    }

    pub fn validate(&self) -> Result<()> {
        for &a in &self.anchors {
            self.window(a, self.face_size, self.face_size)?;
        }
        Ok(())
    }
}

/// Copies one `patch_size` square per anchor out of an `H×W×C` face.
pub fn crop_patches(face: &Tensor, crop: &CropSpec) -> Result<Vec<Tensor>> {
    let &[h, w, c] = face.shape() else {
        return Err(Error::dim("crop_patches", format!("face must be HxWxC, got {:?}", face.shape())));
    };
    let s = crop.patch_size;
    let src = face.values();
    crop.anchors
        .iter()
        .map(|&anchor| {
            let (top, left) = crop.window(anchor, h, w)?;
            let mut out = Vec::with_capacity(s * s * c);
            for row in top..top + s {
                let start = (row * w + left) * c;
                out.extend_from_slice(&src[start..start + s * c]);
            }
            Tensor::new([s, s, c], out)
        })
        .collect()
}
