//! TCP front end for [`BrokerCore`] on tokio.

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};

use crate::broker::{Action, BrokerCore, BrokerLimits, BrokerStats, ConnId};
use crate::codec::{decode, encode, peek_header};

enum Outgoing {
    Bytes(Vec<u8>),
    Close,
}

struct Shared {
    core: Mutex<BrokerCore>,
    conns: Mutex<HashMap<ConnId, mpsc::UnboundedSender<Outgoing>>>,
    next_id: AtomicU64,
    epoch: Instant,
}

impl Shared {
    fn now(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    /// Runs `f` on the core and carries out the resulting actions while
    /// still holding the core lock, so per-connection order is preserved.
    fn with_core(&self, f: impl FnOnce(&mut BrokerCore, u64) -> Vec<Action>) {
        let mut core = self.core.lock().expect("broker lock");
        let actions = f(&mut core, self.now());
        let mut conns = self.conns.lock().expect("conn table lock");
        for a in actions {
            match a {
                Action::Send(c, p) => {
                    if let (Some(tx), Ok(bytes)) = (conns.get(&c), encode(&p)) {
                        let _ = tx.send(Outgoing::Bytes(bytes));
                    }
                }
                Action::Close(c) => {
                    if let Some(tx) = conns.remove(&c) {
                        let _ = tx.send(Outgoing::Close);
                    }
                }
            }
        }
    }
}

/// Handle on a broker serving in the background.
#[derive(Clone)]
pub struct BrokerHandle {
    shared: Arc<Shared>,
    addr: SocketAddr,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> BrokerStats {
        self.shared.core.lock().expect("broker lock").stats()
    }

    pub fn connection_count(&self) -> usize {
        self.shared.core.lock().expect("broker lock").connection_count()
    }

    pub fn retained_payload(&self, topic: &str) -> Option<Vec<u8>> {
        self.shared.core.lock().expect("broker lock").retained(topic).map(|p| p.payload.clone())
    }
}

/// Binds and starts serving on the current tokio runtime.
pub async fn spawn(addr: &str, limits: BrokerLimits) -> io::Result<BrokerHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        core: Mutex::new(BrokerCore::new(limits)),
        conns: Mutex::new(HashMap::new()),
        next_id: AtomicU64::new(1),
        epoch: Instant::now(),
    });
    let ticker = shared.clone();
    tokio::spawn(async move {
        let mut iv = tokio::time::interval(Duration::from_millis(200));
        loop {
            iv.tick().await;
            ticker.with_core(|core, now| core.tick(now));
        }
    });
    let acceptor = shared.clone();
    tokio::spawn(async move {
        loop {
            match listener.accept().await {
                Ok((stream, _)) => {
                    tokio::spawn(connection(stream, acceptor.clone()));
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            }
        }
    });
    Ok(BrokerHandle { shared, addr })
}

async fn connection(stream: TcpStream, shared: Arc<Shared>) {
    let _ = stream.set_nodelay(true);
    let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
    let (tx, mut rx) = mpsc::unbounded_channel();
    shared.conns.lock().expect("conn table lock").insert(id, tx);
    shared.with_core(|core, now| {
        core.open(id, now);
        Vec::new()
    });
    let max_packet = shared.core.lock().expect("broker lock").limits().max_packet_bytes;
    let (mut rd, mut wr) = stream.into_split();
    let (closed_tx, mut closed_rx) = oneshot::channel::<()>();
    tokio::spawn(async move {
        while let Some(o) = rx.recv().await {
            match o {
                Outgoing::Bytes(b) => {
                    if wr.write_all(&b).await.is_err() {
                        break;
                    }
                }
                Outgoing::Close => break,
            }
        }
        let _ = wr.shutdown().await;
        let _ = closed_tx.send(());
    });
    let mut buf: Vec<u8> = Vec::with_capacity(4096);
    let mut chunk = vec![0u8; 8192];
    'read: loop {
        let n = tokio::select! {
            r = rd.read(&mut chunk) => match r {
                Ok(0) | Err(_) => break 'read,
                Ok(n) => n,
            },
            _ = &mut closed_rx => break 'read,
        };
        buf.extend_from_slice(&chunk[..n]);
        loop {
            match peek_header(&buf) {
                Ok(Some((_, rem))) if rem > max_packet => break 'read,
                Err(_) => break 'read,
                _ => {}
            }
            match decode(&buf) {
                Ok(Some((packet, used))) => {
                    buf.drain(..used);
                    shared.with_core(|core, now| core.handle(id, packet, now));
                }
                Ok(None) => break,
                Err(e) => {
                    log::debug!("conn {id}: {e}");
                    break 'read;
                }
            }
        }
    }
    shared.with_core(|core, now| {
        let mut a = core.closed(id, now);
        a.push(Action::Close(id));
        a
    });
}

/// A broker on its own runtime, for binaries and blocking tests.
pub struct StandaloneBroker {
    runtime: Option<tokio::runtime::Runtime>,
    handle: BrokerHandle,
}

impl StandaloneBroker {
    pub fn start(addr: &str, limits: BrokerLimits) -> io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let handle = runtime.block_on(spawn(addr, limits))?;
        Ok(Self { runtime: Some(runtime), handle })
    }

    pub fn handle(&self) -> &BrokerHandle {
        &self.handle
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.handle.addr
    }

    /// Stops serving and drops every connection without a goodbye.
    pub fn kill(mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

impl Drop for StandaloneBroker {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}
