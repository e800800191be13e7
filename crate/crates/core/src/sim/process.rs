//! Subprocess execution with timeouts, cancellation and process-group
//! teardown.

use std::io::{self, Read};
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crate::cancel::CancelToken;

const POLL_INTERVAL: Duration = Duration::from_millis(5);

/// Records every process group spawned through it so callers can verify
/// that nothing outlived a run.
#[derive(Debug, Default)]
pub struct ProcessTracker {
    groups: Mutex<Vec<i32>>,
}

impl ProcessTracker {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, pgid: i32) {
        self.groups.lock().unwrap().push(pgid);
    }

    pub fn spawned(&self) -> Vec<i32> {
        self.groups.lock().unwrap().clone()
    }

    /// Process groups that still have at least one live member.
    pub fn surviving(&self) -> Vec<i32> {
        self.spawned()
            .into_iter()
            .filter(|&pg| group_alive(pg))
            .collect()
    }
}

/// Whether any non-zombie process belongs to `pgid`. Orphaned zombies are
/// reaped by init at its leisure, so `killpg(pg, 0)` alone over-reports.
fn group_alive(pgid: i32) -> bool {
    let Ok(dir) = std::fs::read_dir("/proc") else {
        // SAFETY: signal 0 performs only the existence and permission check.
        return unsafe { libc::killpg(pgid, 0) == 0 };
    };
    dir.filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_str().is_some_and(|n| n.bytes().all(|b| b.is_ascii_digit())))
        .filter_map(|e| std::fs::read_to_string(e.path().join("stat")).ok())
        .any(|stat| {
            // pid (comm) state ppid pgrp ...; comm may contain spaces.
            let Some(rest) = stat.rfind(')').map(|i| &stat[i + 1..]) else {
                return false;
            };
            let mut fields = rest.split_whitespace();
            let state = fields.next().unwrap_or("Z");
            let pgrp = fields.nth(1).and_then(|f| f.parse::<i32>().ok());
            pgrp == Some(pgid) && state != "Z" && state != "X"
        })
}

/// Kills the group and waits (bounded) until its members are gone.
fn sweep_group(pgid: i32) {
    kill_group(pgid);
    let deadline = Instant::now() + Duration::from_secs(2);
    while group_alive(pgid) && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(2));
    }
}

fn kill_group(pgid: i32) {
    // SAFETY: plain syscall on a group id we created; errors (ESRCH) are fine.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunEnd {
    Exited(Option<i32>),
    TimedOut,
    Cancelled,
}

#[derive(Debug)]
pub struct RunOutput {
    /// Interleaved stdout and stderr, capped at the capture limit.
    pub output: String,
    /// Bytes discarded beyond the capture limit.
    pub dropped: usize,
    pub end: RunEnd,
    pub elapsed: Duration,
}

/// Runs `cmd` in a fresh process group. On timeout or cancellation the
/// whole group is killed; after a normal exit the group is swept as well.
pub fn run_command(
    mut cmd: Command,
    timeout: Duration,
    cancel: &CancelToken,
    tracker: Option<&ProcessTracker>,
    capture_limit: usize,
) -> io::Result<RunOutput> {
    let (reader, writer) = io::pipe()?;
    let writer_err = writer.try_clone()?;
    cmd.stdin(Stdio::null())
        .stdout(Stdio::from(writer))
        .stderr(Stdio::from(writer_err))
        .process_group(0);
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    // Drop our copies of the write end so EOF arrives when the group exits.
    drop(cmd);
    let pgid = child.id() as i32;
    if let Some(t) = tracker {
        t.record(pgid);
    }

    let collector = thread::spawn(move || {
        let mut reader = reader;
        let mut kept = Vec::new();
        let mut dropped = 0usize;
        let mut buf = [0u8; 8192];
        loop {
            match reader.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    let room = capture_limit.saturating_sub(kept.len());
                    let take = room.min(n);
                    kept.extend_from_slice(&buf[..take]);
                    dropped += n - take;
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        (kept, dropped)
    });

    let end = loop {
        if let Some(status) = child.try_wait()? {
            break RunEnd::Exited(status.code());
        }
        if cancel.is_cancelled() {
            kill_group(pgid);
            child.wait()?;
            break RunEnd::Cancelled;
        }
        if start.elapsed() >= timeout {
            kill_group(pgid);
            child.wait()?;
            break RunEnd::TimedOut;
        }
        thread::sleep(POLL_INTERVAL);
    };
    sweep_group(pgid);
    let (kept, dropped) = collector.join().unwrap_or_default();
    Ok(RunOutput {
        output: String::from_utf8_lossy(&kept).into_owned(),
        dropped,
        end,
        elapsed: start.elapsed(),
    })
}
