use crate::rngkit::RngStream;
use crate::tensornet::Tensor;
use crate::{Error, Result};

/// Reflection padding used by the random crop.
pub const AUGMENT_PAD: usize = 4;

/// Per-sample augmentation decision. Shifts are crop offsets relative to the
/// unpadded image, in `[-AUGMENT_PAD, AUGMENT_PAD]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentChoice {
    pub flip: bool,
    pub shift_y: isize,
    pub shift_x: isize,
}

impl AugmentChoice {
    pub const IDENTITY: AugmentChoice = AugmentChoice {
        flip: false,
        shift_y: 0,
        shift_x: 0,
    };
}

/// Always exactly three draws: flip, then row offset, then column offset.
pub fn draw_augmentation(stream: &mut RngStream) -> AugmentChoice {
    let span = 2 * AUGMENT_PAD as u64 + 1;
    let flip = stream.next_uniform() < 0.5;
    let shift_y = stream.next_below(span) as isize - AUGMENT_PAD as isize;
    let shift_x = stream.next_below(span) as isize - AUGMENT_PAD as isize;
    AugmentChoice { flip, shift_y, shift_x }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Horizontal flip, then a crop of the reflect-padded image at the chosen offset.
pub fn apply_augmentation(sample: &[f32], shape: [usize; 3], choice: AugmentChoice) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = Vec::with_capacity(sample.len());
    for ch in 0..c {
        let plane = &sample[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = reflect(y as isize + choice.shift_y, h);
            for x in 0..w {
                let mut sx = reflect(x as isize + choice.shift_x, w);
                if choice.flip {
                    sx = w - 1 - sx;
                }
                out.push(plane[sy * w + sx]);
            }
        }
    }
    out
}

/// Random flip and pad-crop for each sample of `[B, C, H, W]`, in sample order.
pub fn augment(batch: &Tensor, stream: &mut RngStream) -> Result<Tensor> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::invalid(format!("augment expects [B, C, H, W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h <= AUGMENT_PAD || w <= AUGMENT_PAD {
        return Err(Error::invalid(format!(
            "augment needs spatial dims of at least {}, got {h}x{w}",
            AUGMENT_PAD + 1
        )));
    }
    let d = c * h * w;
    let mut data = Vec::with_capacity(batch.numel());
    for i in 0..b {
        let choice = draw_augmentation(stream);
        data.extend(apply_augmentation(&batch.data()[i * d..(i + 1) * d], [c, h, w], choice));
    }
    Tensor::new(shape.to_vec(), data)
}
