use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use etmpc::tcp::{Server, ServerHandle, TcpTransport};
use etmpc_core::costmodel::Variant;
use etmpc_core::library::four_mass_oscillator;
use etmpc_core::nalgebra::DVector;
use etmpc_core::netio::{
    CentralNode, ClientError, ErrorCode, EventRequest, Frame, FrameKind, FrameStats, LocalClient, Loopback,
    NodeRegistration, Transport, TransportError, HEADER_LEN,
};
use etmpc_core::problem::{condense, CondensedQp, MpcProblem};
use etmpc_core::protocol::{decode_a1, Precision};
use etmpc_core::sim::{sample_feasible_states, simulate_event_triggered, Plant, SimConfig};

fn four_mass() -> (MpcProblem, Arc<CondensedQp>) {
    let p = four_mass_oscillator();
    let qp = Arc::new(condense(&p).unwrap());
    (p, qp)
}

fn node(qp: &Arc<CondensedQp>, nodes: &[(u16, Variant, Precision)]) -> Arc<CentralNode> {
    let mut c = CentralNode::new();
    for &(id, variant, precision) in nodes {
        c.register(
            id,
            NodeRegistration {
                qp: qp.clone(),
                variant,
                precision,
            },
        );
    }
    Arc::new(c)
}

fn serve(node: Arc<CentralNode>) -> ServerHandle {
    Server::bind("127.0.0.1:0", node).unwrap().spawn().unwrap()
}

/// Wraps a transport and keeps every exchanged frame.
struct Recorder<T> {
    inner: T,
    log: Vec<(Vec<u8>, Vec<u8>)>,
}

impl<T: Transport> Transport for Recorder<T> {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        let reply = self.inner.round_trip(request)?;
        self.log.push((request.to_vec(), reply.clone()));
        Ok(reply)
    }

    fn stats(&self) -> FrameStats {
        self.inner.stats()
    }
}

#[test]
fn sockets_and_loopback_exchange_identical_bytes() {
    let (problem, qp) = four_mass();
    let plant = Plant::of(&problem);
    let x0 = sample_feasible_states(&problem, &qp, 1, 21).unwrap().remove(0);
    for (variant, precision) in [
        (Variant::A1, Precision::Half),
        (Variant::A2, Precision::Full),
        (Variant::A3, Precision::Half),
        (Variant::A4, Precision::Full),
    ] {
        let central = node(&qp, &[(9, variant, precision)]);
        let mut config = SimConfig::new(x0.clone(), variant);
        config.precision = precision;

        let mut local = LocalClient::new(
            Recorder {
                inner: Loopback::new(central.clone()),
                log: Vec::new(),
            },
            qp.clone(),
            config.client_config(9),
        );
        let a = simulate_event_triggered(&plant, &mut local, &config).unwrap();

        let server = serve(central);
        let tcp = TcpTransport::connect(server.addr()).unwrap();
        let mut remote = LocalClient::new(Recorder { inner: tcp, log: Vec::new() }, qp.clone(), config.client_config(9));
        let b = simulate_event_triggered(&plant, &mut remote, &config).unwrap();
        server.shutdown().unwrap();

        assert_eq!(a, b, "{variant}");
        assert!(!local.transport().log.is_empty());
        assert_eq!(local.transport().log, remote.transport().log, "{variant}");
        assert_eq!(a.frames.frames(), 2 * a.events() as u64);
    }
}

#[test]
fn interleaved_clients_get_their_own_replies() {
    let (problem, qp) = four_mass();
    let nodes = [(1, Variant::A1, Precision::Half), (2, Variant::A3, Precision::Full)];
    let central = node(&qp, &nodes);
    let server = serve(central.clone());
    let states = sample_feasible_states(&problem, &qp, 12, 4).unwrap();

    let handles: Vec<_> = nodes
        .iter()
        .map(|&(id, variant, precision)| {
            let states = states.clone();
            let central = central.clone();
            let addr = server.addr();
            std::thread::spawn(move || {
                let mut tcp = TcpTransport::connect(addr).unwrap();
                for x in &states {
                    let request = EventRequest { node_id: id, state: x.clone() }.to_frame().encode();
                    let reply = tcp.round_trip(&request).unwrap();
                    assert_eq!(reply, central.handle(&request));
                    let frame = Frame::decode(&reply).unwrap();
                    assert_eq!(frame.node_id, id);
                    assert_eq!(frame.kind, FrameKind::Reply(variant));
                    let _ = precision;
                }
                tcp.stats()
            })
        })
        .collect();
    for h in handles {
        let stats = h.join().unwrap();
        assert_eq!(stats.requests, 12);
        assert_eq!(stats.replies, 12);
    }
    server.shutdown().unwrap();
}

#[test]
fn origin_request_gets_an_empty_active_set() {
    let (_, qp) = four_mass();
    let server = serve(node(&qp, &[(3, Variant::A1, Precision::Half)]));
    let mut tcp = TcpTransport::connect(server.addr()).unwrap();
    let request = EventRequest {
        node_id: 3,
        state: DVector::zeros(8),
    };
    let frame = Frame::decode(&tcp.round_trip(&request.to_frame().encode()).unwrap()).unwrap();
    assert_eq!(frame.kind, FrameKind::Reply(Variant::A1));
    assert_eq!(frame.payload, vec![0u8; 30]);
    assert!(decode_a1(&frame.payload, 236).unwrap().is_empty());
    server.shutdown().unwrap();
}

#[test]
fn server_errors_surface_as_typed_client_errors() {
    let (_, qp) = four_mass();
    let server = serve(node(&qp, &[(1, Variant::A1, Precision::Half)]));
    let mut config = SimConfig::new(DVector::zeros(8), Variant::A1).client_config(1);

    let mut client = LocalClient::new(TcpTransport::connect(server.addr()).unwrap(), qp.clone(), config);
    let far = DVector::from_element(8, 3.9);
    assert!(matches!(client.request_law(&far), Err(ClientError::CentralInfeasible(_))));

    config.node_id = 77;
    let mut stranger = LocalClient::new(TcpTransport::connect(server.addr()).unwrap(), qp.clone(), config);
    match stranger.request_law(&DVector::zeros(8)) {
        Err(ClientError::Remote { code, .. }) => assert_eq!(code, Some(ErrorCode::UnknownNode)),
        other => panic!("{other:?}"),
    }

    // the server keeps serving after per-request failures
    let mut tcp = TcpTransport::connect(server.addr()).unwrap();
    let short = Frame::new(FrameKind::Request, 1, vec![0; 7]).encode();
    let reply = Frame::decode(&tcp.round_trip(&short).unwrap()).unwrap();
    assert_eq!((reply.kind, reply.payload[0]), (FrameKind::Error, ErrorCode::BadRequestLength as u8));
    assert!(client.request_law(&DVector::zeros(8)).is_ok());
    server.shutdown().unwrap();
}

#[test]
fn a_broken_header_gets_an_error_frame_and_a_hang_up() {
    let (_, qp) = four_mass();
    let server = serve(node(&qp, &[(1, Variant::A1, Precision::Half)]));
    let mut s = TcpStream::connect(server.addr()).unwrap();
    s.write_all(b"XX\x01\x00\x00\x01\x00\x00\x00\x00").unwrap();
    let mut reply = Vec::new();
    s.read_to_end(&mut reply).unwrap();
    let frame = Frame::decode(&reply).unwrap();
    assert_eq!(frame.kind, FrameKind::Error);
    assert_eq!(frame.payload[0], ErrorCode::Malformed as u8);
    server.shutdown().unwrap();
}

#[test]
fn silence_times_out_and_a_drop_is_retriable() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let peer = std::thread::spawn(move || {
        // first connection: read the request, never answer
        let (mut a, _) = listener.accept().unwrap();
        let mut buf = [0u8; HEADER_LEN + 8];
        a.read_exact(&mut buf).unwrap();
        // second connection: hang up after reading
        let (mut b, _) = listener.accept().unwrap();
        b.read_exact(&mut buf).unwrap();
        drop(b);
        a
    });
    let mut tcp = TcpTransport::connect(addr)
        .unwrap()
        .with_timeout(Some(Duration::from_millis(200)));
    let request = EventRequest {
        node_id: 1,
        state: DVector::zeros(1),
    }
    .to_frame()
    .encode();
    let err = tcp.round_trip(&request).unwrap_err();
    assert_eq!(err, TransportError::Timeout);
    assert!(err.is_retriable());
    // reconnects, then the peer hangs up
    let err = tcp.round_trip(&request).unwrap_err();
    assert!(matches!(err, TransportError::ConnectionLost(_)), "{err:?}");
    assert!(err.is_retriable());
    assert_eq!(tcp.stats(), FrameStats::default());
    drop(peer.join().unwrap());
}

#[test]
fn replies_slower_than_the_budget_are_counted() {
    let (_, qp) = four_mass();
    let server = serve(node(&qp, &[(1, Variant::A1, Precision::Half)]));
    let mut tcp = TcpTransport::connect(server.addr()).unwrap().with_latency_budget(Duration::ZERO);
    let request = EventRequest {
        node_id: 1,
        state: DVector::zeros(8),
    };
    tcp.round_trip(&request.to_frame().encode()).unwrap();
    assert_eq!(tcp.late_replies(), 1);
    assert!(tcp.slowest_reply() > Duration::ZERO);
    server.shutdown().unwrap();
}
