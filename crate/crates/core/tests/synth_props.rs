use std::f64::consts::PI;

use htlane::synth::{gen_scene, LaneGeometry};
use htlane::tensor::{resample, Resample};
use htlane::{gen_sample, global_argmax, HoughConfig, SceneConfig, VoteTable};

#[test]
fn mask_and_existence_agree_over_many_seeds() {
    let cfg = SceneConfig::default();
    for seed in 0..1000 {
        let s = gen_sample(seed, &cfg);
        assert_eq!(s.image.dims(), [1, 64, 160]);
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.exist.len(), 4);
        let lanes = s.exist.iter().filter(|&&e| e).count();
        assert!((cfg.lanes_min..=cfg.lanes_max).contains(&lanes), "seed {seed}");
        for c in 1..=4u8 {
            let n = s.mask.count(c);
            if s.exist[c as usize - 1] {
                assert!(n >= cfg.lane_width_min * 20, "seed {seed} lane {c}: {n} pixels");
            } else {
                assert_eq!(n, 0, "seed {seed} lane {c}");
            }
        }
        assert!(s.mask.max_label() <= 4);

        // channels are ordered left to right along the bottom row
        let bottom = 63;
        let mut last = None;
        for col in 0..160 {
            let v = s.mask.get(bottom, col);
            if v > 0 {
                if let Some(prev) = last {
                    assert!(v >= prev, "seed {seed}: label {v} left of {prev}");
                }
                last = Some(v);
            }
        }
    }
}

/// `(θ, ρ)` of the lane axis in the centered coordinates of a `rows × cols`
/// grid obtained by 4× average pooling.
fn pooled_line(lane: &LaneGeometry, image_height: usize, rows: usize, cols: usize) -> (f64, f64) {
    let to_pooled = |x: f32, y: f32| {
        let px = (x as f64 - 1.5) / 4.0 - (cols as f64 - 1.0) / 2.0;
        let py = (y as f64 - 1.5) / 4.0 - (rows as f64 - 1.0) / 2.0;
        (px, py)
    };
    let y0 = lane.top_row as f32;
    let y1 = (image_height - 1) as f32;
    let (ax, ay) = to_pooled(lane.axis_at(y0, image_height), y0);
    let (bx, by) = to_pooled(lane.axis_at(y1, image_height), y1);
    let mut theta = (-(bx - ax)).atan2(by - ay);
    if theta < 0.0 {
        theta += PI;
    }
    if theta >= PI {
        theta -= PI;
    }
    (theta, ax * theta.cos() + ay * theta.sin())
}

#[test]
fn straight_lanes_peak_at_their_axis() {
    let cfg = SceneConfig {
        max_sagitta: 0.0,
        ..SceneConfig::default()
    };
    let hc = HoughConfig::desk();
    let table = VoteTable::new(hc);
    let mut checked = 0;
    for seed in 0..200 {
        let (sample, lanes) = gen_scene(seed, &cfg);
        for lane in &lanes {
            let m = sample.mask.indicator::<f32>(lane.label);
            let m = resample(Resample::AvgPool2, &resample(Resample::AvgPool2, &m).unwrap()).unwrap();
            let h = table.ht_forward(&m).unwrap();
            let best = global_argmax(&h).unwrap();

            let (theta, rho) = pooled_line(lane, 64, hc.height, hc.width);
            let dtheta = PI / hc.n_theta as f64;
            let j = (theta / dtheta).round() as i64;
            let k = ((rho + hc.rho_max()) / hc.delta_rho()).round() as i64;
            let n_theta = hc.n_theta as i64;
            let n_rho = hc.n_rho as i64;
            // angle index wraps at π with the offset mirrored
            let candidates = [
                (j, k),
                (j - n_theta, n_rho - 1 - k),
                (j + n_theta, n_rho - 1 - k),
            ];
            let (bj, bk) = (best.theta_idx as i64, best.rho_idx as i64);
            let close = candidates
                .iter()
                .any(|&(cj, ck)| (bj - cj).abs() <= 2 && (bk - ck).abs() <= 2);
            assert!(
                close,
                "seed {seed} lane {}: argmax {best:?}, axis bin ({j},{k})",
                lane.label
            );
            checked += 1;
        }
    }
    assert!(checked > 300);
}
