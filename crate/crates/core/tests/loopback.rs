//! Live sender/receiver runs over 127.0.0.1 and their equivalence with the
//! simulator.

use std::net::{SocketAddr, UdpSocket};
use std::time::Duration;

use blockstop::detector::SyntheticBlobDetector;
use blockstop::image::partition;
use blockstop::policy::StopPolicy;
use blockstop::scenegen::{generate, BlobSpec, SceneSpec};
use blockstop::sim::{build_schedule, run, OrderKind, RunSetup};
use blockstop::utility::{compute_utility_map, UtilityMap, UtilitySource, DEFAULT_EPSILON};
use blockstop::wire::{
    encode_data_frame, encode_stop_frame, quantize_share, quantize_total, receiver_loop,
    sender_loop, DataFrame, ReceiverConfig, ReceiverOutcome, SendReport, SenderConfig, StopFrame,
    DEFAULT_MTU_BUDGET,
};
use blockstop::{BlockGrid, Detector, ImageRaster, StopReason};

fn bind() -> UdpSocket {
    UdpSocket::bind("127.0.0.1:0").unwrap()
}

fn addr(socket: &UdpSocket) -> SocketAddr {
    socket.local_addr().unwrap()
}

/// 256x128 single-blob scene (8x8 grid of 32x16 blocks) plus its detector
/// and oracle utility map.
fn fixture_scene() -> (ImageRaster, BlockGrid, SyntheticBlobDetector, UtilityMap) {
    let spec = SceneSpec {
        id: "loopback".into(),
        width: 256,
        height: 128,
        blobs: vec![BlobSpec {
            center_x: 118.0,
            center_y: 66.0,
            radius_x: 42.0,
            radius_y: 26.0,
            peak: 215,
        }],
        noise_level: 40,
        seed: 77,
    };
    let scene = generate(&spec, 128, 16).unwrap();
    let grid = partition(&scene.image, 32, 16).unwrap();
    let detector = SyntheticBlobDetector::new(128, 16, scene.above_threshold_mass / 0.9);
    let record = compute_utility_map("loopback", &scene.image, &grid, &detector, 0.5).unwrap();
    (scene.image, grid, detector, record.map)
}

#[test]
fn live_receiver_matches_simulator_at_zero_loss() {
    let (image, grid, detector, utility) = fixture_scene();
    let schedule = build_schedule(&grid, OrderKind::CenterFirst, 5.0, 0.0, 3);
    let policy = StopPolicy::Utility { tau_rho: 0.8 };

    let sim_trace = run(&RunSetup {
        image_id: "loopback",
        image: &image,
        grid: &grid,
        utility: &utility,
        detector: &detector,
        policy,
        schedule: &schedule,
        feedback_delay_ms: 0.0,
        inference_cadence: 8,
        epsilon: DEFAULT_EPSILON,
        gt_boxes: &[],
    });
    assert_eq!(sim_trace.stop_reason, StopReason::UtilityThreshold);
    assert!(sim_trace.stop_step < grid.n_blocks());

    let receiver_data = bind();
    let receiver_control = bind();
    let sender_data = bind();
    let sender_control = bind();
    let data_peer = addr(&receiver_data);
    let control_peer = addr(&sender_control);

    let mut config = ReceiverConfig::new(image.meta(), grid, policy);
    config.order_label = OrderKind::CenterFirst;
    let outcome = std::thread::scope(|scope| {
        let receiver = scope.spawn(|| {
            receiver_loop(&detector, &receiver_data, &receiver_control, control_peer, &config)
                .unwrap()
        });
        let report = sender_loop(
            &image,
            &grid,
            &utility,
            &schedule,
            &sender_data,
            data_peer,
            &sender_control,
            &SenderConfig {
                image_id: 7,
                mtu_budget: DEFAULT_MTU_BUDGET,
                inter_arrival: Duration::from_millis(2),
            },
        )
        .unwrap();
        assert!(report.stopped_early, "stop frame must reach the sender");
        receiver.join().unwrap()
    });

    let live = match outcome {
        ReceiverOutcome::Finished(report) => report,
        ReceiverOutcome::IdleEmpty => panic!("receiver saw no frames"),
    };
    assert_eq!(live.trace.stop_step, sim_trace.stop_step);
    assert_eq!(live.trace.stop_reason, sim_trace.stop_reason);
    let live_prefix: Vec<_> = live.trace.events.iter().map(|e| e.block).collect();
    let sim_prefix: Vec<_> = sim_trace.events.iter().map(|e| e.block).collect();
    assert_eq!(live_prefix, sim_prefix, "identical stop block-set prefix");
}

#[test]
fn sender_halts_within_flight_bound_and_filters_image_id() {
    // 10x10 grid so the schedule has 100 entries
    let image = ImageRaster::new(320, 160, 1, vec![0; 320 * 160]).unwrap();
    let grid = partition(&image, 32, 16).unwrap();
    let utility = UtilityMap::new(
        "stub".into(),
        vec![0.0; grid.n_blocks() as usize],
        UtilitySource::EmpiricalOracle,
    );
    let schedule = build_schedule(&grid, OrderKind::Raster, 5.0, 0.0, 1);

    let stub_data = bind();
    let sender_data = bind();
    let sender_control = bind();
    let data_peer = addr(&stub_data);
    let control_peer = addr(&sender_control);
    stub_data
        .set_read_timeout(Some(Duration::from_millis(200)))
        .unwrap();

    let report = std::thread::scope(|scope| {
        scope.spawn(|| {
            let control = bind();
            let mut buf = [0u8; 2048];
            let mut seen = 0u32;
            while seen < 10 {
                if let Ok(n) = stub_data.recv(&mut buf) {
                    if blockstop::wire::decode_data_frame(&buf[..n]).is_ok() {
                        seen += 1;
                        if seen == 5 {
                            // stop frame for a different image: must be ignored
                            let rogue = encode_stop_frame(&StopFrame {
                                image_id: 999,
                                stop_step: 5,
                                reason: StopReason::UtilityThreshold,
                            });
                            control.send_to(&rogue, control_peer).unwrap();
                        }
                    }
                }
            }
            let stop = encode_stop_frame(&StopFrame {
                image_id: 7,
                stop_step: 10,
                reason: StopReason::UtilityThreshold,
            });
            control.send_to(&stop, control_peer).unwrap();
        });
        sender_loop(
            &image,
            &grid,
            &utility,
            &schedule,
            &sender_data,
            data_peer,
            &sender_control,
            &SenderConfig {
                image_id: 7,
                mtu_budget: DEFAULT_MTU_BUDGET,
                inter_arrival: Duration::from_millis(2),
            },
        )
        .unwrap()
    });

    assert!(report.stopped_early);
    assert_eq!(report.stop_frame.unwrap().image_id, 7);
    // at least the 10 frames the stub waited for, plus a bounded flight of
    // packets sent while the stop signal was in transit
    assert!(
        (10..=35).contains(&report.frames_sent),
        "frames_sent = {}",
        report.frames_sent
    );
}

#[test]
fn sender_without_stop_sends_whole_schedule_minus_injected_loss() {
    let image = ImageRaster::new(128, 64, 1, vec![0; 128 * 64]).unwrap();
    let grid = partition(&image, 32, 16).unwrap();
    let utility = UtilityMap::new(
        "stub".into(),
        vec![0.0; 16],
        UtilitySource::EmpiricalOracle,
    );
    let sink = bind();
    let sender_data = bind();
    let sender_control = bind();

    let lossless = build_schedule(&grid, OrderKind::Raster, 5.0, 0.0, 1);
    let report: SendReport = sender_loop(
        &image,
        &grid,
        &utility,
        &lossless,
        &sender_data,
        addr(&sink),
        &sender_control,
        &SenderConfig {
            image_id: 1,
            mtu_budget: DEFAULT_MTU_BUDGET,
            inter_arrival: Duration::from_millis(1),
        },
    )
    .unwrap();
    assert_eq!(report.frames_sent, 16);
    assert!(!report.stopped_early);

    let lossy = build_schedule(&grid, OrderKind::Raster, 5.0, 0.3, 9);
    let report = sender_loop(
        &image,
        &grid,
        &utility,
        &lossy,
        &sender_data,
        addr(&sink),
        &sender_control,
        &SenderConfig {
            image_id: 1,
            mtu_budget: DEFAULT_MTU_BUDGET,
            inter_arrival: Duration::from_millis(1),
        },
    )
    .unwrap();
    assert_eq!(report.frames_sent as usize, lossy.delivered_count());
    assert_eq!(
        (report.frames_sent + report.frames_suppressed) as usize,
        lossy.len()
    );
}

/// Raw frame blaster used by the duplicate/reorder tests.
fn blast_frames(
    image: &ImageRaster,
    grid: &BlockGrid,
    utility: &UtilityMap,
    order: &[u32],
    copies: u32,
    image_id: u32,
    peer: SocketAddr,
    pace: Duration,
) {
    let socket = bind();
    let total_q = quantize_total(utility.total);
    for &id in order {
        let block = blockstop::BlockId(id);
        let frame = DataFrame {
            image_id,
            block_id: block,
            n_blocks: grid.n_blocks(),
            utility_q: quantize_share(utility.value(block), utility.total),
            total_utility_q: total_q,
            payload: blockstop::image::extract_block(image, grid, block).unwrap(),
        };
        let bytes = encode_data_frame(&frame, DEFAULT_MTU_BUDGET).unwrap();
        for _ in 0..copies {
            socket.send_to(&bytes, peer).unwrap();
        }
        std::thread::sleep(pace);
    }
}

fn receive_with(
    detector: &dyn Detector,
    config: &ReceiverConfig,
    send: impl FnOnce(SocketAddr) + Send,
) -> ReceiverOutcome {
    let receiver_data = bind();
    let receiver_control = bind();
    let control_sink = bind();
    let data_peer = addr(&receiver_data);
    let control_peer = addr(&control_sink);
    std::thread::scope(|scope| {
        let handle = scope.spawn(move || {
            receiver_loop(detector, &receiver_data, &receiver_control, control_peer, config)
                .unwrap()
        });
        send(data_peer);
        handle.join().unwrap()
    })
}

#[test]
fn duplicate_frames_change_nothing() {
    let (image, grid, detector, utility) = fixture_scene();
    let order: Vec<u32> = (0..grid.n_blocks()).collect();
    let policy = StopPolicy::Utility { tau_rho: 0.8 };

    let run_with_copies = |copies: u32| {
        let mut config = ReceiverConfig::new(image.meta(), grid, policy);
        config.idle_timeout = Duration::from_millis(400);
        let outcome = receive_with(&detector, &config, |peer| {
            blast_frames(
                &image,
                &grid,
                &utility,
                &order,
                copies,
                5,
                peer,
                Duration::from_millis(1),
            );
        });
        match outcome {
            ReceiverOutcome::Finished(report) => report,
            ReceiverOutcome::IdleEmpty => panic!("no frames seen"),
        }
    };

    let once = run_with_copies(1);
    let twice = run_with_copies(2);
    assert!(twice.duplicate_frames >= 1);
    assert_eq!(once.trace.stop_step, twice.trace.stop_step);
    assert_eq!(once.trace.stop_reason, twice.trace.stop_reason);
    let blocks = |r: &blockstop::RunTrace| r.events.iter().map(|e| e.block).collect::<Vec<_>>();
    assert_eq!(blocks(&once.trace), blocks(&twice.trace));
    let rhos = |r: &blockstop::RunTrace| {
        r.events.iter().map(|e| e.rho.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(rhos(&once.trace), rhos(&twice.trace));
}

#[test]
fn reverse_order_with_top_threshold_completes_reception() {
    let (image, grid, detector, _) = fixture_scene();
    // uniform map: every block carries an equal positive share
    let utility = UtilityMap::new(
        "uniform".into(),
        vec![1.0; grid.n_blocks() as usize],
        UtilitySource::EmpiricalOracle,
    );
    let order: Vec<u32> = (0..grid.n_blocks()).rev().collect();
    let policy = StopPolicy::Utility { tau_rho: 1.0 };

    let mut config = ReceiverConfig::new(image.meta(), grid, policy);
    config.idle_timeout = Duration::from_millis(400);
    let outcome = receive_with(&detector, &config, |peer| {
        blast_frames(
            &image,
            &grid,
            &utility,
            &order,
            1,
            6,
            peer,
            Duration::from_millis(1),
        );
    });
    let report = match outcome {
        ReceiverOutcome::Finished(report) => report,
        ReceiverOutcome::IdleEmpty => panic!("no frames seen"),
    };
    // stops only once everything arrived, and the rebuilt observation equals
    // the source image: detections match a full-image pass
    assert_eq!(report.trace.stop_step, grid.n_blocks());
    assert_eq!(report.trace.packets_delivered, grid.n_blocks());
    assert_eq!(report.trace.final_detections, detector.detect(&image));
}

#[test]
fn idle_timeout_without_sender_reports_empty() {
    let (image, grid, detector, _) = fixture_scene();
    let mut config = ReceiverConfig::new(image.meta(), grid, StopPolicy::Full);
    config.idle_timeout = Duration::from_millis(150);
    let outcome = receive_with(&detector, &config, |_peer| {});
    assert!(matches!(outcome, ReceiverOutcome::IdleEmpty));
}
