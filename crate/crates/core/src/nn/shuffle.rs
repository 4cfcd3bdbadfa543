use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};

/// Channel map of a `groups`-way shuffle: `out[k] = in[(k mod g) * (C/g) + k / g]`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(shape_err!(
            "channel shuffle: {channels} channels not divisible by {groups} groups"
        ));
    }
    let per = channels / groups;
    Ok((0..channels)
        .map(|k| (k % groups) * per + k / groups)
        .collect())
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

pub fn channel_shuffle(g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
    let c = *g
        .shape(x)
        .get(1)
        .ok_or_else(|| shape_err!("channel shuffle needs NCHW input"))?;
    let perm = shuffle_permutation(c, groups)?;
    g.permute_channels(x, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_channels_two_groups() {
        assert_eq!(shuffle_permutation(4, 2).unwrap(), vec![0, 2, 1, 3]);
        assert_eq!(shuffle_permutation(6, 1).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert!(shuffle_permutation(6, 4).is_err());
    }

    #[test]
    fn inverse_roundtrip() {
        let p = shuffle_permutation(12, 3).unwrap();
        let inv = inverse_permutation(&p);
        for k in 0..12 {
            assert_eq!(inv[p[k]], k);
            assert_eq!(p[inv[k]], k);
        }
    }
}
