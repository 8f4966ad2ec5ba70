use crate::error::{Error, Result};
use crate::heads::DpeLevels;
use crate::nn::{Bound, Conv};
use crate::tensor::{Tape, Var};

fn upsample_to(tape: &mut Tape, x: Var, times: u32, h: usize, w: usize) -> Result<Var> {
    let mut y = x;
    for _ in 0..times {
        y = tape.upsample2x(y);
    }
    tape.crop(y, h, w)
}

fn check_half(tape: &Tape, fine: Var, coarse: Var, what: &str) -> Result<()> {
    let (f, c) = (tape.shape(fine), tape.shape(coarse));
    if f.n != c.n || f.c != c.c || c.h != f.h.div_ceil(2) || c.w != f.w.div_ceil(2) {
        return Err(Error::shape("dpe", format!("{what}: {c} is not half the resolution of {f}")));
    }
    Ok(())
}

/// Localization input at the resolution of `P_l`:
///
/// `P_l + up(P_{l+1}) + dconv(up(P_l) + P_{l−1})`
///
/// with each term switched by `levels` (`l+2` adds `up(up(P_{l+2}))`).
/// Coarser maps that do not exist are skipped.
#[allow(clippy::too_many_arguments)]
pub fn dpe_forward(
    tape: &mut Tape,
    p: &Bound,
    p_prev: Option<Var>,
    p_l: Var,
    p_next: Option<Var>,
    p_next2: Option<Var>,
    dconv: Option<&Conv>,
    levels: DpeLevels,
) -> Result<Var> {
    let s = tape.shape(p_l);
    let mut terms = Vec::with_capacity(4);
    if levels.same {
        terms.push(p_l);
    }
    if levels.coarser {
        if let Some(next) = p_next {
            check_half(tape, p_l, next, "P_l+1")?;
            terms.push(upsample_to(tape, next, 1, s.h, s.w)?);
        }
    }
    if levels.coarser2 {
        if let (Some(next), Some(next2)) = (p_next, p_next2) {
            check_half(tape, next, next2, "P_l+2")?;
            terms.push(upsample_to(tape, next2, 2, s.h, s.w)?);
        }
    }
    if levels.finer {
        let prev = p_prev.ok_or_else(|| Error::InvalidArgument("dpe needs the finer level".into()))?;
        let dconv = dconv.ok_or_else(|| Error::InvalidArgument("dpe needs its downsampling conv".into()))?;
        check_half(tape, prev, p_l, "P_l")?;
        let sp = tape.shape(prev);
        let fused = if levels.same {
            let up = upsample_to(tape, p_l, 1, sp.h, sp.w)?;
            tape.add(up, prev)?
        } else {
            prev
        };
        let down = dconv.forward(tape, p, fused)?;
        let down = tape.crop(down, s.h, s.w)?;
        terms.push(down);
    }
    let mut acc = *terms.first().ok_or_else(|| Error::InvalidArgument("dpe has no input terms".into()))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}
