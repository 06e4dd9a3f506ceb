use std::time::{Duration, Instant};

use proptest::prelude::*;
use telehaptic::channel::*;
use telehaptic::rtt::{RttError, RttEstimator};

proptest! {
    #[test]
    fn releases_are_fifo_and_never_early(
        gaps in prop::collection::vec(0.0..30.0f64, 1..40),
        from in 0.0..300.0f64,
        to in 0.0..300.0f64,
        cap in prop::option::of(5.0..200.0f64),
    ) {
        let model = DelayModel::Ramp { from_ms: from, to_ms: to, duration_s: 0.5 };
        let mut ch = VirtualChannel::with_cap(model, cap);
        let mut t = 0.0;
        let mut sent = Vec::new();
        for (i, g) in gaps.iter().enumerate() {
            t += g;
            let r = ch.send(t, i);
            prop_assert!(r >= t + model.delay_ms(t) - 1e-9);
            sent.push((t, r));
        }
        let got = ch.drain_ready(f64::INFINITY);
        prop_assert_eq!(got.iter().map(|m| m.1).collect::<Vec<_>>(), (0..gaps.len()).collect::<Vec<_>>());
        for w in got.windows(2) {
            prop_assert!(w[1].0 >= w[0].0);
            if let Some(c) = cap {
                prop_assert!(w[1].0 - w[0].0 >= 1000.0 / c - 1e-9);
            }
        }
    }
}

#[test]
fn fixed_delay_holds_messages_until_due() {
    let mut ch = VirtualChannel::new(DelayModel::Fixed { ms: 100.0 });
    ch.send(0.0, "a");
    ch.send(10.0, "b");
    assert_eq!(ch.recv(99.9), None);
    assert_eq!(ch.recv(100.0), Some((100.0, "a")));
    assert_eq!(ch.recv(100.0), None);
    assert_eq!(ch.next_release(), Some(110.0));
    assert_eq!(ch.in_flight(), 1);
}

#[test]
fn ramp_delay_grows_with_send_time() {
    let mut ch = VirtualChannel::new(DelayModel::Ramp { from_ms: 100.0, to_ms: 200.0, duration_s: 10.0 });
    assert_eq!(ch.send(0.0, ()), 100.0);
    assert_eq!(ch.send(5000.0, ()), 5150.0);
    assert_eq!(ch.send(20_000.0, ()), 20_200.0);
}

#[test]
fn fps_cap_spaces_releases() {
    let mut ch = VirtualChannel::with_cap(DelayModel::Fixed { ms: 0.0 }, Some(10.0));
    let r: Vec<f64> = (0..3).map(|i| ch.send(i as f64, ())).collect();
    assert_eq!(r, vec![0.0, 100.0, 200.0]);
}

#[test]
fn wall_clock_channel_applies_delay() {
    let (tx, mut rx) = delayed_channel(DelayModel::Fixed { ms: 30.0 }, None);
    let t0 = Instant::now();
    tx.send(1u32).unwrap();
    tx.clone().send(2u32).unwrap();
    assert_eq!(rx.try_recv(), Err(ChannelError::Timeout));
    assert_eq!(rx.recv_timeout(Duration::from_secs(1)), Ok(1));
    assert!(t0.elapsed() >= Duration::from_millis(30));
    assert_eq!(rx.recv_timeout(Duration::from_secs(1)), Ok(2));
    drop(tx);
    assert_eq!(rx.recv_timeout(Duration::from_millis(10)), Err(ChannelError::Closed));
}

#[test]
fn short_timeout_keeps_the_message() {
    let (tx, mut rx) = delayed_channel(DelayModel::Fixed { ms: 50.0 }, None);
    tx.send("x").unwrap();
    assert_eq!(rx.recv_timeout(Duration::from_millis(5)), Err(ChannelError::Timeout));
    assert_eq!(rx.recv_timeout(Duration::from_secs(1)), Ok("x"));
}

#[test]
fn rtt_converges_on_a_virtual_round_trip() {
    let mut down = VirtualChannel::new(DelayModel::Fixed { ms: 100.0 });
    let mut up = VirtualChannel::new(DelayModel::Fixed { ms: 100.0 });
    let mut est = RttEstimator::default();
    let mut pongs = 0;
    let mut t = 0.0;
    while pongs < 5 {
        if (t as u64).is_multiple_of(50) {
            let seq = est.ping(t / 1000.0);
            down.send(t, seq);
        }
        for (at, seq) in down.drain_ready(t) {
            up.send(at, seq);
        }
        for (at, seq) in up.drain_ready(t) {
            est.pong(seq, at / 1000.0);
            pongs += 1;
        }
        t += 1.0;
    }
    let e = est.estimate(t / 1000.0).unwrap();
    assert!((e - 0.2).abs() <= 0.02, "estimate {e}");
}

#[test]
fn rtt_on_a_zero_delay_loopback_is_small() {
    let (tx, mut rx) = delayed_channel::<u32>(DelayModel::Fixed { ms: 0.0 }, None);
    let (back_tx, mut back_rx) = delayed_channel::<u32>(DelayModel::Fixed { ms: 0.0 }, None);
    let echo = std::thread::spawn(move || {
        while let Ok(seq) = rx.recv_timeout(Duration::from_secs(1)) {
            back_tx.send(seq).unwrap();
        }
    });
    let t0 = Instant::now();
    let now = || t0.elapsed().as_secs_f64();
    let mut est = RttEstimator::default();
    for _ in 0..5 {
        let seq = est.ping(now());
        tx.send(seq).unwrap();
        let got = back_rx.recv_timeout(Duration::from_secs(1)).unwrap();
        est.pong(got, now());
    }
    assert!(est.estimate(now()).unwrap() < 0.005);
    drop(tx);
    echo.join().unwrap();
}

#[test]
fn dead_link_times_out() {
    let mut est = RttEstimator::default();
    let s = est.ping(0.0);
    est.pong(s, 0.2);
    est.ping(1.0);
    assert!(est.estimate(2.9).is_ok());
    assert_eq!(est.estimate(3.1), Err(RttError::Timeout));
}
