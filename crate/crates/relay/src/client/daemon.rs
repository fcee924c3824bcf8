//! Background lane driver: periodic sync, sync on request or reconnect,
//! and retries while the server is unreachable.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::Client;

pub struct DaemonHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl DaemonHandle {
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Run `sync_cycle` immediately, then every `sync_interval`, whenever the
/// client asks for one, and every `retry_interval` while disconnected.
pub fn spawn_daemon(client: Arc<Client>, poll: Duration) -> std::io::Result<DaemonHandle> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = thread::Builder::new().name("cxr-sync".into()).spawn(move || {
        let mut last: Option<Instant> = None;
        while !flag.load(Ordering::SeqCst) {
            let due = match last {
                None => true,
                Some(t) => {
                    let every = match client.connected() {
                        Some(false) => client.config().retry_interval,
                        _ => client.config().sync_interval,
                    };
                    t.elapsed() >= every
                }
            };
            if due || client.take_sync_wanted() {
                match client.sync_cycle() {
                    Ok(r) => log::info!("sync: {r:?}"),
                    Err(e) => log::warn!("sync failed: {e}"),
                }
                last = Some(Instant::now());
            }
            thread::sleep(poll);
        }
    })?;
    Ok(DaemonHandle { stop, thread: Some(thread) })
}
