use crate::error::{Error, Result};
use crate::heads::SceDownsample;
use crate::nn::{Bound, Conv};
use crate::tensor::{Tape, Var};

/// The stride-2 operator applied to `P_l` before concatenation. One
/// instance serves every level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Downsample {
    Conv(Conv),
    AvgPool,
    MaxPool,
}

impl Downsample {
    pub fn new(kind: SceDownsample, name: &str, width: usize) -> Self {
        match kind {
            SceDownsample::AvgPool3x3 => Downsample::AvgPool,
            SceDownsample::MaxPool3x3 => Downsample::MaxPool,
            conv => Downsample::Conv(Conv::new(name, width, width, conv.kernel(), 2)),
        }
    }

    pub fn conv(&self) -> Option<&Conv> {
        match self {
            Downsample::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Downsample::Conv(c) => c.forward(tape, p, x),
            Downsample::AvgPool => tape.avg_pool(x, 3, 2, 1),
            Downsample::MaxPool => tape.max_pool(x, 3, 2, 1),
        }
    }
}

/// Classification input at half the resolution of `P_l`:
/// `concat(downsample(P_l), P_{l+1})`.
pub fn sce_forward(tape: &mut Tape, p: &Bound, p_l: Var, p_next: Var, down: &Downsample) -> Result<Var> {
    let (sl, sn) = (tape.shape(p_l), tape.shape(p_next));
    if sn.n != sl.n || sn.h != sl.h.div_ceil(2) || sn.w != sl.w.div_ceil(2) {
        return Err(Error::shape("sce", format!("P_l+1 {sn} is not half the resolution of P_l {sl}")));
    }
    let d = down.forward(tape, p, p_l)?;
    tape.concat_channels(d, p_next)
}
