//! TCP transport for the sandbox protocol.

use super::protocol::{self, ProtocolError, SandboxRequest, SandboxResponse};
use super::{SandboxEndpoint, SandboxError, SandboxManager};
use crate::model::{ErrorKind, ObsStatus};
use std::collections::HashSet;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

/// Serves a [`SandboxManager`] on a TCP listener, one thread per connection.
pub struct SandboxServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl SandboxServer {
    pub fn spawn(manager: Arc<SandboxManager>, bind: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let m = manager.clone();
                std::thread::spawn(move || {
                    let _ = serve_connection(&m, stream);
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SandboxServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

fn serve_connection(manager: &SandboxManager, stream: TcpStream) -> Result<(), ProtocolError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let mut seen = HashSet::new();
    while let Some(req) = protocol::read_message::<SandboxRequest>(&mut reader)? {
        let resp = if seen.insert(req.request_id) {
            manager.handle(&req)
        } else {
            SandboxResponse {
                request_id: req.request_id,
                status: ObsStatus::Error,
                output: format!("request id {} reused on this connection", req.request_id),
                error_kind: Some(ErrorKind::InvalidInput),
                reward_payload: None,
            }
        };
        protocol::write_message(&mut writer, &resp)?;
    }
    Ok(())
}

/// Client side of the TCP transport.
pub struct TcpEndpoint {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
}

impl TcpEndpoint {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, SandboxError> {
        let stream = TcpStream::connect_timeout(&addr, timeout)
            .map_err(|e| SandboxError::Unreachable(format!("{addr}: {e}")))?;
        stream
            .set_read_timeout(Some(timeout))
            .map_err(|e| SandboxError::Unreachable(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let reader = BufReader::new(
            stream
                .try_clone()
                .map_err(|e| SandboxError::Unreachable(e.to_string()))?,
        );
        Ok(Self {
            reader,
            writer: stream,
            next_id: 0,
        })
    }
}

impl SandboxEndpoint for TcpEndpoint {
    fn call(&mut self, req: &SandboxRequest) -> Result<SandboxResponse, SandboxError> {
        let unreachable = |e: ProtocolError| match e {
            ProtocolError::Io(io) => SandboxError::Unreachable(io.to_string()),
            other => SandboxError::Protocol(other),
        };
        protocol::write_message(&mut self.writer, req).map_err(unreachable)?;
        protocol::read_message(&mut self.reader)
            .map_err(unreachable)?
            .ok_or_else(|| SandboxError::Unreachable("connection closed".into()))
    }

    fn next_request_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToolCall;
    use crate::sandbox::SandboxSession;
    use crate::value::Value;

    #[test]
    fn tcp_session_matches_in_process() {
        let task = crate::sandbox::tests::retail_task("cancelled");
        let server =
            SandboxServer::spawn(Arc::new(SandboxManager::new([task])), "127.0.0.1:0").unwrap();
        let mut ep = TcpEndpoint::connect(server.addr(), Duration::from_secs(5)).unwrap();
        let mut s = SandboxSession::open(&mut ep, "sb-1", "t1").unwrap();
        let obs = s
            .execute(&ToolCall::with_args(
                "get_order",
                [("order_id", Value::str("O2"))],
            ))
            .unwrap();
        assert_eq!(obs.error_kind, Some(ErrorKind::NotFound));
        s.execute(&ToolCall::with_args(
            "cancel_order",
            [("order_id", Value::str("O1"))],
        ))
        .unwrap();
        let (_, payload) = s.submit().unwrap();
        assert!(payload.task_completed);
        // A second session on the same connection draws fresh request ids.
        let mut s = SandboxSession::open(&mut ep, "sb-2", "t1").unwrap();
        assert!(s
            .execute(&ToolCall::with_args(
                "get_order",
                [("order_id", Value::str("O1"))]
            ))
            .unwrap()
            .is_ok());
        server.shutdown();
    }

    #[test]
    fn reused_request_id_is_rejected() {
        let server =
            SandboxServer::spawn(Arc::new(SandboxManager::new([])), "127.0.0.1:0").unwrap();
        let mut ep = TcpEndpoint::connect(server.addr(), Duration::from_secs(5)).unwrap();
        let req = SandboxRequest {
            request_id: 5,
            sandbox_id: "x".into(),
            tool: "__close__".into(),
            args: Default::default(),
            is_final: false,
        };
        assert_eq!(ep.call(&req).unwrap().status, ObsStatus::Ok);
        assert_eq!(
            ep.call(&req).unwrap().error_kind,
            Some(ErrorKind::InvalidInput)
        );
    }

    #[test]
    fn closed_port_is_unreachable() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        drop(l);
        assert!(matches!(
            TcpEndpoint::connect(addr, Duration::from_millis(300)),
            Err(SandboxError::Unreachable(_))
        ));
    }
}
