use super::clip::MotionClip;
use super::condition::SparseCondition;
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 120;
pub const DEFAULT_HISTORY: usize = 12;

/// A fixed-length training or generation slice of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    /// Leading frames shared with the previous window.
    pub history_len: usize,
    pub condition: SparseCondition,
    pub target: MotionClip,
}

/// Start frames of the windows covering `len` frames.
///
/// Windows advance by `window − history`; the last one is shifted back so it
/// ends exactly at the clip end, which can make its overlap longer than
/// `history`. The second element of each pair is that overlap.
pub fn window_starts(len: usize, window: usize, history: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || history >= window {
        return Err(Error::InvalidArgument(format!(
            "history {history} must be smaller than window {window}"
        )));
    }
    if len < window {
        return Err(Error::ClipTooShort { len, need: window });
    }
    let stride = window - history;
    let mut out = vec![(0, 0)];
    let mut start = 0;
    while start + window < len {
        let next = (start + stride).min(len - window);
        out.push((next, start + window - next));
        start = next;
    }
    Ok(out)
}

pub fn make_windows(
    clip: &MotionClip,
    cond: &SparseCondition,
    window: usize,
    history: usize,
) -> Result<Vec<Window>> {
    if clip.len() != cond.len() {
        return Err(Error::LengthMismatch(clip.len(), cond.len()));
    }
    Ok(window_starts(clip.len(), window, history)?
        .into_iter()
        .map(|(start, history_len)| Window {
            start,
            history_len,
            condition: cond.slice(start, window),
            target: clip.slice(start, window),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_cases() {
        assert_eq!(window_starts(120, 120, 12).unwrap(), vec![(0, 0)]);
        assert_eq!(window_starts(228, 120, 12).unwrap(), vec![(0, 0), (108, 12)]);
        assert_eq!(window_starts(200, 120, 12).unwrap(), vec![(0, 0), (80, 40)]);
        assert!(matches!(
            window_starts(119, 120, 12),
            Err(Error::ClipTooShort { len: 119, need: 120 })
        ));
        assert!(window_starts(200, 120, 120).is_err());
    }

    proptest! {
        #[test]
        fn windows_cover_every_frame(len in 1usize..600, window in 1usize..130, hist in 0usize..20) {
            prop_assume!(hist < window && len >= window);
            let ws = window_starts(len, window, hist).unwrap();
            let mut covered = vec![false; len];
            let mut prev_end = 0;
            for (i, &(s, h)) in ws.iter().enumerate() {
                prop_assert!(s + window <= len);
                prop_assert!(h < window);
                if i > 0 {
                    prop_assert!(h >= hist);
                    prop_assert_eq!(s + h, prev_end);
                }
                for c in &mut covered[s..s + window] { *c = true; }
                prev_end = s + window;
            }
            prop_assert_eq!(prev_end, len);
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
