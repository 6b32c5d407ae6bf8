use crate::error::{Error, Result};
use crate::linalg::Tensor;

/// `m[i][j] = 1` iff query row `i` and key row `j` belong to the same agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentMask(Tensor);

/// `allowed[i][j] = 1` iff query `i` may attend to key `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendMask(Tensor);

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 || t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("{what} must be a binary matrix")));
    }
    Ok(())
}

impl AgentMask {
    pub fn new(m: Tensor) -> Result<Self> {
        check_binary(&m, "agent mask")?;
        Ok(Self(m))
    }

    /// Same-agent indicator between two id sequences.
    pub fn from_ids(self_ids: &[usize], other_ids: &[usize]) -> Self {
        let data = self_ids
            .iter()
            .flat_map(|a| other_ids.iter().map(move |b| f64::from(u8::from(a == b))))
            .collect();
        Self(Tensor::new(&[self_ids.len(), other_ids.len()], data).expect("non-empty ids"))
    }

    pub fn full(m1: usize, m2: usize, value: bool) -> Self {
        Self(Tensor::full(&[m1, m2], f64::from(u8::from(value))))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Restricts to the given rows and columns.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self(select(&self.0, rows, cols))
    }
}

impl AttendMask {
    pub fn new(m: Tensor) -> Result<Self> {
        check_binary(&m, "attend mask")?;
        Ok(Self(m))
    }

    pub fn all(m1: usize, m2: usize) -> Self {
        Self(Tensor::ones(&[m1, m2]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.0.at2(i, j) != 0.0
    }

    /// First query row with no allowed key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        let n = self.0.shape()[1];
        self.0
            .data()
            .chunks(n)
            .position(|row| row.iter().all(|&v| v == 0.0))
    }

    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self(select(&self.0, rows, cols))
    }

    /// Additive pre-softmax bias: 0 where allowed, −1e30 where forbidden.
    pub fn additive_bias(&self) -> Tensor {
        self.0.map(|v| if v != 0.0 { 0.0 } else { -1e30 })
    }
}

fn select(t: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let data = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| t.at2(r, c)))
        .collect();
    Tensor::new(&[rows.len(), cols.len()], data).expect("non-empty selection")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Encoder,
    DecoderCausal,
}

/// Masks over a sequence laid out agent-major, time-minor: flat index
/// `agent · T_total + t`.
///
/// `presence` is `[N×T_total]`; `ids[i]` is the identity of agent row `i`.
/// Absent entries are forbidden both as queries and as keys; in
/// decoder-causal mode a query at time `t` may only see keys at times `≤ t`.
pub fn build_masks(presence: &Tensor, mode: MaskMode, ids: &[usize]) -> Result<(AgentMask, AttendMask)> {
    check_binary(presence, "presence")?;
    let (n, t_total) = (presence.shape()[0], presence.shape()[1]);
    if ids.len() != n {
        return Err(Error::shape("build_masks ids", presence.shape(), &[ids.len()]));
    }
    let m = n * t_total;
    let seq_ids: Vec<usize> = (0..m).map(|k| ids[k / t_total]).collect();
    let agent = AgentMask::from_ids(&seq_ids, &seq_ids);
    let mut allowed = Tensor::zeros(&[m, m]);
    for a in 0..m {
        let (ia, ta) = (a / t_total, a % t_total);
        if presence.at2(ia, ta) == 0.0 {
            continue;
        }
        for b in 0..m {
            let (ib, tb) = (b / t_total, b % t_total);
            let visible = presence.at2(ib, tb) != 0.0 && (mode == MaskMode::Encoder || tb <= ta);
            if visible {
                allowed.set2(a, b, 1.0);
            }
        }
    }
    Ok((agent, AttendMask(allowed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_agent_encoder_all_ones() {
        let (a, m) = build_masks(&Tensor::ones(&[1, 4]), MaskMode::Encoder, &[7]).unwrap();
        assert!(a.tensor().data().iter().all(|&v| v == 1.0));
        assert!(m.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_agents_block_diagonal() {
        let (a, _) = build_masks(&Tensor::ones(&[2, 3]), MaskMode::Encoder, &[0, 1]).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let same = i / 3 == j / 3;
                assert_eq!(a.tensor().at2(i, j), if same { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn decoder_causal_lower_triangular() {
        let (_, m) = build_masks(&Tensor::ones(&[1, 3]), MaskMode::DecoderCausal, &[0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allowed(i, j), j <= i);
            }
        }
    }

    #[test]
    fn absent_entries_forbidden() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0, 1.0]]).unwrap();
        let (_, m) = build_masks(&p, MaskMode::Encoder, &[0]).unwrap();
        assert_eq!(m.first_empty_row(), Some(1));
        assert!(!m.allowed(0, 1) && m.allowed(0, 2));
    }
}
