//! A TCP forwarder that can refuse new links, used to decide when a node may
//! reach a restarted broker.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

struct State {
    open: AtomicBool,
    stop: AtomicBool,
    links: Mutex<Vec<TcpStream>>,
    upstream: Mutex<SocketAddr>,
}

pub struct LinkGate {
    addr: SocketAddr,
    state: Arc<State>,
    thread: Option<JoinHandle<()>>,
}

impl LinkGate {
    /// Listens on an ephemeral loopback port and forwards to `upstream`
    /// while open. A closed gate accepts and immediately drops connections.
    pub fn start(upstream: SocketAddr) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let state = Arc::new(State {
            open: AtomicBool::new(true),
            stop: AtomicBool::new(false),
            links: Mutex::new(Vec::new()),
            upstream: Mutex::new(upstream),
        });
        let st = state.clone();
        let thread = std::thread::Builder::new().name("link-gate".into()).spawn(move || accept_loop(listener, st))?;
        Ok(Self { addr, state, thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn set_open(&self, open: bool) {
        self.state.open.store(open, Ordering::SeqCst);
    }

    /// Where new links are forwarded to.
    pub fn set_upstream(&self, addr: SocketAddr) {
        *self.state.upstream.lock().expect("gate lock") = addr;
    }

    /// Shuts every forwarded link down.
    pub fn cut(&self) {
        let mut links = self.state.links.lock().expect("gate lock");
        for s in links.drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for LinkGate {
    fn drop(&mut self) {
        self.state.stop.store(true, Ordering::SeqCst);
        self.cut();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn accept_loop(listener: TcpListener, st: Arc<State>) {
    while !st.stop.load(Ordering::SeqCst) {
        let client = match listener.accept() {
            Ok((c, _)) => c,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
                continue;
            }
            Err(_) => continue,
        };
        if !st.open.load(Ordering::SeqCst) {
            let _ = client.shutdown(Shutdown::Both);
            continue;
        }
        let _ = client.set_nonblocking(false);
        let upstream = *st.upstream.lock().expect("gate lock");
        let Ok(server) = TcpStream::connect_timeout(&upstream, Duration::from_secs(1)) else {
            let _ = client.shutdown(Shutdown::Both);
            continue;
        };
        let _ = client.set_nodelay(true);
        let _ = server.set_nodelay(true);
        let (Ok(c2), Ok(s2)) = (client.try_clone(), server.try_clone()) else { continue };
        {
            let mut links = st.links.lock().expect("gate lock");
            links.retain(|s| s.peer_addr().is_ok());
            if let (Ok(a), Ok(b)) = (client.try_clone(), server.try_clone()) {
                links.push(a);
                links.push(b);
            }
        }
        pipe(client, s2);
        pipe(server, c2);
    }
}

fn pipe(mut from: TcpStream, mut to: TcpStream) {
    std::thread::spawn(move || {
        let mut buf = [0u8; 8192];
        loop {
            match from.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if to.write_all(&buf[..n]).is_err() {
                        break;
                    }
                }
            }
        }
        let _ = to.shutdown(Shutdown::Both);
        let _ = from.shutdown(Shutdown::Both);
    });
}
