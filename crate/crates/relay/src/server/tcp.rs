//! Framed protocol over TCP, one thread per connection.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::link::Endpoint;
use crate::protocol::{encode_frame, read_frame_bytes, FrameIoError, Message};

type Open = Arc<Mutex<HashMap<u64, TcpStream>>>;

pub struct TcpServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    open: Open,
    thread: Option<JoinHandle<()>>,
}

impl TcpServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting and close every open connection.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    /// Block until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        for (_, s) in self.open.lock().unwrap_or_else(|e| e.into_inner()).drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TcpServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

pub fn serve_tcp(endpoint: Arc<dyn Endpoint>, listener: TcpListener) -> io::Result<TcpServerHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let open: Open = Arc::default();
    let registry = open.clone();
    let thread = thread::Builder::new().name("cxr-accept".into()).spawn(move || {
        for (n, conn) in listener.incoming().enumerate() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let n = n as u64;
                    if let Ok(c) = stream.try_clone() {
                        registry.lock().unwrap_or_else(|e| e.into_inner()).insert(n, c);
                    }
                    let (ep, reg) = (endpoint.clone(), registry.clone());
                    let _ = thread::Builder::new().name("cxr-conn".into()).spawn(move || {
                        connection(ep, stream);
                        reg.lock().unwrap_or_else(|e| e.into_inner()).remove(&n);
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    })?;
    Ok(TcpServerHandle { addr, stop, open, thread: Some(thread) })
}

fn connection(endpoint: Arc<dyn Endpoint>, mut stream: TcpStream) {
    let peer = stream.peer_addr().ok();
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_secs(300)));
    loop {
        match read_frame_bytes(&mut stream) {
            Ok(frame) => {
                let reply = endpoint.handle_frame(&frame);
                if stream.write_all(&reply).and_then(|_| stream.flush()).is_err() {
                    break;
                }
            }
            Err(FrameIoError::Protocol(e)) => {
                // the byte stream cannot be resynchronized after a bad header
                log::warn!("{peer:?}: {e}");
                if let Ok(f) = encode_frame(&Message::Error { code: e.code as u16, message: e.to_string() }) {
                    let _ = stream.write_all(&f);
                }
                // closing with unread input would reset the connection and
                // could discard the error frame, so drain briefly first
                let _ = stream.shutdown(Shutdown::Write);
                let _ = stream.set_read_timeout(Some(Duration::from_secs(1)));
                let _ = io::copy(&mut (&mut stream).take(1 << 20), &mut io::sink());
                break;
            }
            Err(FrameIoError::Io(_)) => break,
        }
    }
}
