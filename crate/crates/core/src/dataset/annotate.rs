use super::{SessionLog, TraversabilityLabel};

/// Result of scanning one or more sessions for sustained motion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AutoAnnotation {
    /// `(env, session, frame_index, label)` for every emitted positive.
    pub positives: Vec<(String, String, usize, TraversabilityLabel)>,
    /// Candidate windows skipped because a frame lacked velocity.
    pub skipped_windows: usize,
}

fn frame_period(session: &SessionLog) -> Option<f64> {
    let mut dts: Vec<f64> = session
        .entries
        .windows(2)
        .map(|w| w[1].timestamp_s - w[0].timestamp_s)
        .collect();
    if dts.is_empty() {
        return None;
    }
    dts.sort_by(|a, b| a.total_cmp(b));
    Some(dts[dts.len() / 2])
}

/// Emits the center frame of every `window_s` interval during which the
/// robot moved at no less than `min_v` (linear speed).
///
/// Each frame covers `[t_i, t_i + period)` with `period` the median sample
/// spacing. A frame at time `t` is emitted iff `[t − window_s/2, t + window_s/2]`
/// lies inside the recorded span and every frame overlapping that interval
/// has velocity `≥ min_v`. The window slides one frame at a time, so each
/// frame is considered exactly once as a center.
pub fn auto_annotate_positives(session: &SessionLog, window_s: f64, min_v: f64) -> AutoAnnotation {
    let mut out = AutoAnnotation::default();
    let Some(period) = frame_period(session) else {
        return out;
    };
    let entries = &session.entries;
    let (start, end) = (
        entries[0].timestamp_s,
        entries.last().expect("non-empty").timestamp_s + period,
    );
    let half = window_s / 2.0;
    // tolerance for float accumulation in timestamps
    let tol = 1e-6 * period.max(1.0);
    let mut lo = 0;
    for center in entries {
        let (w0, w1) = (center.timestamp_s - half, center.timestamp_s + half);
        if w0 < start - tol || w1 > end + tol {
            continue;
        }
        while entries[lo].timestamp_s + period <= w0 + tol {
            lo += 1;
        }
        let mut missing = false;
        let mut moving = true;
        for e in entries[lo..].iter().take_while(|e| e.timestamp_s <= w1 - tol) {
            match e.velocity_mps {
                None => missing = true,
                Some(v) if v < min_v => moving = false,
                Some(_) => {}
            }
        }
        if missing {
            out.skipped_windows += 1;
        } else if moving {
            out.positives.push((
                session.env.clone(),
                session.session.clone(),
                center.frame_index,
                TraversabilityLabel::auto_positive(),
            ));
        }
    }
    out
}

/// Annotates independent sessions; the result is sorted so that it does not
/// depend on the order the sessions are supplied in.
pub fn auto_annotate_sessions(sessions: &[SessionLog], window_s: f64, min_v: f64) -> AutoAnnotation {
    let mut all = AutoAnnotation::default();
    for s in sessions {
        let a = auto_annotate_positives(s, window_s, min_v);
        all.positives.extend(a.positives);
        all.skipped_windows += a.skipped_windows;
    }
    all.positives
        .sort_by(|a, b| (&a.0, &a.1, a.2).cmp(&(&b.0, &b.1, b.2)));
    all
}

#[cfg(test)]
mod tests {
    use super::super::{OdometryEntry, AUTO_MIN_VELOCITY, AUTO_WINDOW_S};
    use super::*;

    fn indices(a: &AutoAnnotation) -> Vec<usize> {
        a.positives.iter().map(|p| p.2).collect()
    }

    /// Continuous-time reference: velocity is piecewise constant over each
    /// frame's interval; sample the window densely.
    fn oracle(session: &SessionLog, window: f64, min_v: f64) -> Vec<usize> {
        let n = session.entries.len();
        let period = session.entries[1].timestamp_s - session.entries[0].timestamp_s;
        let span_end = session.entries[n - 1].timestamp_s + period;
        let vel_at = |t: f64| {
            let i = ((t - session.entries[0].timestamp_s) / period).floor() as usize;
            session.entries[i.min(n - 1)].velocity_mps.unwrap()
        };
        let mut out = Vec::new();
        for (i, e) in session.entries.iter().enumerate() {
            let (w0, w1) = (e.timestamp_s - window / 2.0, e.timestamp_s + window / 2.0);
            if w0 < session.entries[0].timestamp_s - 1e-9 || w1 > span_end + 1e-9 {
                continue;
            }
            let steps = 2000;
            let ok = (0..=steps).all(|k| {
                let t = (w0 + (w1 - w0) * k as f64 / steps as f64).min(span_end - 1e-9);
                vel_at(t) >= min_v
            });
            if ok {
                out.push(i);
            }
        }
        out
    }

    #[test]
    fn eight_frames_at_three_hz_emit_the_middle() {
        let s = SessionLog::uniform("e", "s", 1.0 / 3.0, &[0.5; 8]);
        let a = auto_annotate_positives(&s, AUTO_WINDOW_S, AUTO_MIN_VELOCITY);
        assert_eq!(indices(&a), vec![4]);
        assert_eq!(a.positives[0].3, TraversabilityLabel::auto_positive());
    }

    #[test]
    fn static_robot_emits_nothing() {
        let s = SessionLog::uniform("e", "s", 1.0 / 3.0, &[0.0; 40]);
        assert!(auto_annotate_positives(&s, AUTO_WINDOW_S, AUTO_MIN_VELOCITY).positives.is_empty());
    }

    #[test]
    fn dip_suppresses_overlapping_windows() {
        let mut v = vec![0.5; 31];
        v[15] = 0.2;
        let s = SessionLog::uniform("e", "s", 1.0 / 3.0, &v);
        let got = indices(&auto_annotate_positives(&s, AUTO_WINDOW_S, AUTO_MIN_VELOCITY));
        let want = oracle(&s, AUTO_WINDOW_S, AUTO_MIN_VELOCITY);
        assert_eq!(got, want);
        assert!(!got.is_empty());
        assert!(got.iter().all(|&i| (i as i64 - 15).abs() > 3));
    }

    #[test]
    fn matches_oracle_on_varied_profiles() {
        use rand::{Rng, SeedableRng};
        for seed in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..60)
                .map(|_| {
                    let h: f64 = rng.random();
                    if h < 0.1 { 0.1 } else { 0.35 + h }
                })
                .collect();
            let s = SessionLog::uniform("e", "s", 1.0 / 3.0, &v);
            assert_eq!(
                indices(&auto_annotate_positives(&s, AUTO_WINDOW_S, AUTO_MIN_VELOCITY)),
                oracle(&s, AUTO_WINDOW_S, AUTO_MIN_VELOCITY),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn missing_velocity_skips_window() {
        let mut s = SessionLog::uniform("e", "s", 1.0 / 3.0, &[0.5; 20]);
        s.entries[10] = OdometryEntry { velocity_mps: None, ..s.entries[10] };
        let a = auto_annotate_positives(&s, AUTO_WINDOW_S, AUTO_MIN_VELOCITY);
        assert!(a.skipped_windows > 0);
        assert!(indices(&a).iter().all(|&i| (i as i64 - 10).abs() > 3));
    }

    #[test]
    fn session_order_does_not_matter() {
        let a = SessionLog::uniform("e1", "a", 1.0 / 3.0, &[0.5; 12]);
        let mut v = vec![0.5; 15];
        v[3] = 0.0;
        let b = SessionLog::uniform("e2", "b", 1.0 / 3.0, &v);
        let ab = auto_annotate_sessions(&[a.clone(), b.clone()], AUTO_WINDOW_S, AUTO_MIN_VELOCITY);
        let ba = auto_annotate_sessions(&[b, a], AUTO_WINDOW_S, AUTO_MIN_VELOCITY);
        assert_eq!(ab, ba);
    }
}
