//! Normalized return relative to a random and an expert reference.

use crate::error::{Error, Result};

/// `100 · (ret − random_ret) / (expert_ret − random_ret)`.
pub fn normalized_score(ret: f64, random_ret: f64, expert_ret: f64) -> Result<f64> {
    let span = expert_ret - random_ret;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "degenerate reference returns: random {random_ret}, expert {expert_ret}"
        )));
    }
    Ok(100.0 * (ret - random_ret) / span)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_and_midpoint() {
        assert_eq!(normalized_score(-3.0, -3.0, 7.0).unwrap(), 0.0);
        assert_eq!(normalized_score(7.0, -3.0, 7.0).unwrap(), 100.0);
        assert_eq!(normalized_score(500.0, 0.0, 1000.0).unwrap(), 50.0);
    }

    #[test]
    fn degenerate_pair_is_rejected() {
        assert!(normalized_score(1.0, 2.0, 2.0).is_err());
    }
}
