//! Delta encoding of a target box relative to a proposal:
//! `(dx, dy, dw, dh)` with center offsets normalized by the proposal size
//! and log-scaled size ratios.

use crate::geometry::Box2D;

pub fn encode_deltas(proposal: &Box2D, gt: &Box2D) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (gx - px) / pw,
        (gy - py) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ]
}

/// Inverse of [`encode_deltas`]. Deltas of zero return the proposal itself.
pub fn decode_deltas(proposal: &Box2D, deltas: &[f64; 4]) -> Box2D {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = px + deltas[0] * pw;
    let cy = py + deltas[1] * ph;
    let w = pw * deltas[2].exp();
    let h = ph * deltas[3].exp();
    Box2D {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn zero_deltas_are_identity() {
        let p = Box2D::new(10.0, 20.0, 50.0, 60.0).unwrap();
        let d = decode_deltas(&p, &[0.0; 4]);
        assert_eq!(d, p);
    }

    #[test]
    fn roundtrip_recovers_gt() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = Box2D::new(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(60.0..120.0),
                rng.gen_range(60.0..120.0),
            )
            .unwrap();
            let g = Box2D::new(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(60.0..120.0),
                rng.gen_range(60.0..120.0),
            )
            .unwrap();
            let back = decode_deltas(&p, &encode_deltas(&p, &g));
            for (a, b) in back.as_array().iter().zip(g.as_array()) {
                assert!((a - b).abs() / b.abs().max(1.0) < 1e-6);
            }
        }
    }
}
