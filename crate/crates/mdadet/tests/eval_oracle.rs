//! The production AP implementation against the brute-force reference in
//! `support::oracle`, over randomized matching instances. The two codepaths
//! share no logic: one is a cumulative single pass over ranked detections,
//! the other re-matches from scratch at every score threshold and scans the
//! precision envelope literally.

mod support;

use mdadet::data::BoundingBox;
use mdadet::eval::{average_precision, GtBox, ScoredBox};
use mdadet::rng::{stream, StreamId};
use rand::Rng;
use support::oracle::{ODet, OGt};

fn random_box(rng: &mut rand_chacha::ChaCha8Rng) -> (f64, f64, f64, f64) {
    let x0: f64 = rng.gen_range(0.0..50.0);
    let y0: f64 = rng.gen_range(0.0..50.0);
    let w: f64 = rng.gen_range(2.0..20.0);
    let h: f64 = rng.gen_range(2.0..20.0);
    (x0, y0, x0 + w, y0 + h)
}

#[test]
fn ap_matches_brute_force_oracle_on_randomized_instances() {
    let mut rng = stream(20_240_817, StreamId::Test);
    let mut nontrivial = 0usize;
    for case in 0..200 {
        let num_images = rng.gen_range(1..=4usize);
        let mut gts = Vec::new();
        let mut ogts = Vec::new();
        for img in 0..num_images {
            for _ in 0..rng.gen_range(0..=5usize) {
                let (x0, y0, x1, y1) = random_box(&mut rng);
                gts.push(GtBox {
                    image: img as u64,
                    bbox: BoundingBox {
                        x_min: x0,
                        y_min: y0,
                        x_max: x1,
                        y_max: y1,
                    },
                });
                ogts.push(OGt {
                    image: img,
                    x0,
                    y0,
                    x1,
                    y1,
                });
            }
        }

        let mut dets = Vec::new();
        let mut odets = Vec::new();
        for _ in 0..rng.gen_range(0..=12usize) {
            let img = rng.gen_range(0..num_images);
            // Half the detections perturb a real gt box so matches at
            // assorted IoU levels actually occur; the rest are noise.
            let (x0, y0, x1, y1) = if !gts.is_empty() && rng.gen_bool(0.5) {
                let g = &gts[rng.gen_range(0..gts.len())];
                let dx: f64 = rng.gen_range(-6.0..6.0);
                let dy: f64 = rng.gen_range(-6.0..6.0);
                let grow: f64 = rng.gen_range(0.8..1.25);
                let b = &g.bbox;
                (
                    b.x_min + dx,
                    b.y_min + dy,
                    b.x_min + dx + b.width() * grow,
                    b.y_min + dy + b.height() * grow,
                )
            } else {
                random_box(&mut rng)
            };
            // Continuous scores: exact ties have probability zero, which the
            // oracle's threshold-sweep formulation requires.
            let score: f64 = rng.gen_range(0.0..1.0);
            dets.push(ScoredBox {
                image: img as u64,
                bbox: BoundingBox {
                    x_min: x0,
                    y_min: y0,
                    x_max: x1,
                    y_max: y1,
                },
                score,
            });
            odets.push(ODet {
                image: img,
                x0,
                y0,
                x1,
                y1,
                score,
            });
        }

        let iou_thr = [0.3, 0.5, 0.75][case % 3];
        let ours = average_precision(&dets, &gts, iou_thr);
        if gts.is_empty() {
            assert_eq!(ours, None, "case {case}: empty gt must report not-present");
            continue;
        }
        let reference = support::oracle::oracle_ap(&odets, &ogts, iou_thr);
        let ours = ours.expect("present class yields an AP");
        assert!(
            (ours - reference).abs() <= 1e-9,
            "case {case} (iou {iou_thr}): ours {ours} vs oracle {reference}"
        );
        if ours > 0.0 && ours < 1.0 {
            nontrivial += 1;
        }
    }
    // The generator must exercise the interesting middle ground, not just
    // AP 0 and AP 1 instances.
    assert!(nontrivial >= 40, "only {nontrivial} nontrivial cases");
}
