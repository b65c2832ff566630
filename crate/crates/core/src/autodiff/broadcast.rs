use crate::error::{Error, Result};

/// How a right-hand operand is laid over a left-hand operand of larger or
/// equal extent.
///
/// The right shape is aligned to the trailing dimensions of the left shape;
/// each of its dimensions must either match or be 1.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand equals the trailing dims of the left one: `i % len`.
    Suffix(usize),
    /// General case: right-operand flat index for every left element.
    Indexed(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn plan(left: &[usize], right: &[usize]) -> Result<Self> {
        if left == right {
            return Ok(Broadcast::Same);
        }
        let fail = || Error::shape(format!("shape {right:?} cannot be broadcast onto {left:?}"));
        if right.len() > left.len() {
            return Err(fail());
        }
        let offset = left.len() - right.len();
        for (i, &d) in right.iter().enumerate() {
            if d != 1 && d != left[offset + i] {
                return Err(fail());
            }
        }
        if right == &left[offset..] {
            return Ok(Broadcast::Suffix(right.iter().product()));
        }

        // Strides of the right operand in left-operand coordinates; a
        // broadcast dimension gets stride 0.
        let mut strides = vec![0usize; left.len()];
        let mut acc = 1;
        for i in (0..right.len()).rev() {
            if right[i] != 1 {
                strides[offset + i] = acc;
            }
            acc *= right[i];
        }
        let numel: usize = left.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut counter = vec![0usize; left.len()];
        let mut flat = 0usize;
        for _ in 0..numel {
            index.push(flat);
            for axis in (0..left.len()).rev() {
                counter[axis] += 1;
                flat += strides[axis];
                if counter[axis] < left[axis] {
                    break;
                }
                flat -= strides[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
        Ok(Broadcast::Indexed(index))
    }

    #[inline]
    pub(crate) fn apply<T: Copy>(&self, left: &[T], right: &[T], mut f: impl FnMut(T, T) -> T) -> Vec<T> {
        match self {
            Broadcast::Same => left.iter().zip(right).map(|(&a, &b)| f(a, b)).collect(),
            Broadcast::Suffix(len) => {
                let mut out = Vec::with_capacity(left.len());
                for chunk in left.chunks(*len) {
                    out.extend(chunk.iter().zip(right).map(|(&a, &b)| f(a, b)));
                }
                out
            }
            Broadcast::Indexed(index) => left.iter().zip(index).map(|(&a, &j)| f(a, right[j])).collect(),
        }
    }

    /// Right-operand index of left element `i`.
    #[inline]
    pub(crate) fn right_index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(len) => i % len,
            Broadcast::Indexed(index) => index[i],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_axis_broadcast_indices() {
        // [B=2, N=2, D=3] with [B=2, 1, D=3]
        let plan = Broadcast::plan(&[2, 2, 3], &[2, 1, 3]).unwrap();
        let idx: Vec<_> = (0..12).map(|i| plan.right_index(i)).collect();
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5]);
    }

    #[test]
    fn column_broadcast_indices() {
        let plan = Broadcast::plan(&[2, 3], &[2, 1]).unwrap();
        let idx: Vec<_> = (0..6).map(|i| plan.right_index(i)).collect();
        assert_eq!(idx, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn suffix_is_detected() {
        assert!(matches!(
            Broadcast::plan(&[4, 2, 3], &[3]).unwrap(),
            Broadcast::Suffix(3)
        ));
    }

    #[test]
    fn rejects_mismatch() {
        assert!(Broadcast::plan(&[2, 3], &[2]).is_err());
        assert!(Broadcast::plan(&[3], &[2, 3]).is_err());
    }
}
