use std::thread::JoinHandle;

use crossbeam::channel::{unbounded, Receiver, Sender};

type Task = Box<dyn FnOnce() + Send + 'static>;

/// Fixed-capacity thread pool that spawns workers on first need and keeps
/// them for its whole lifetime. Tasks must not panic; callers catch unwinds.
pub(crate) struct WorkerPool {
    capacity: usize,
    tx: Option<Sender<Task>>,
    rx: Receiver<Task>,
    workers: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    pub(crate) fn new(capacity: usize) -> Self {
        let (tx, rx) = unbounded();
        WorkerPool {
            capacity,
            tx: Some(tx),
            rx,
            workers: Vec::new(),
        }
    }

    pub(crate) fn spawned(&self) -> usize {
        self.workers.len()
    }

    /// Grows the pool to `min(wanted, capacity)` threads.
    pub(crate) fn ensure_workers(&mut self, wanted: usize) {
        while self.workers.len() < wanted.min(self.capacity) {
            let rx = self.rx.clone();
            let id = self.workers.len();
            let handle = std::thread::Builder::new()
                .name(format!("fedsim-worker-{id}"))
                .spawn(move || {
                    while let Ok(task) = rx.recv() {
                        task();
                    }
                })
                .expect("spawn worker thread");
            self.workers.push(handle);
        }
    }

    pub(crate) fn submit(&self, task: Task) {
        self.tx
            .as_ref()
            .expect("pool is live")
            .send(task)
            .expect("workers hold the receiver");
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.tx.take();
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
    }
}
