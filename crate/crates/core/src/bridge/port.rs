use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::BridgeError;

/// How long a pipe read waits for bytes before reporting `TimedOut`,
/// matching the behaviour of a serial port with a read timeout.
const READ_TIMEOUT: Duration = Duration::from_millis(50);

#[derive(Debug, Default)]
struct Channel {
    state: Mutex<ChannelState>,
    ready: Condvar,
}

#[derive(Debug, Default)]
struct ChannelState {
    buf: VecDeque<u8>,
    closed: bool,
}

impl Channel {
    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }
}

/// One end of an in-memory duplex byte pipe. Cloning gives another handle
/// on the same end, so one clone can write while another reads.
#[derive(Debug, Clone)]
pub struct PipeEnd {
    tx: Arc<Channel>,
    rx: Arc<Channel>,
}

/// A connected pair of pipe ends.
pub fn pipe() -> (PipeEnd, PipeEnd) {
    let a = Arc::new(Channel::default());
    let b = Arc::new(Channel::default());
    (PipeEnd { tx: a.clone(), rx: b.clone() }, PipeEnd { tx: b, rx: a })
}

impl PipeEnd {
    /// Closes both directions. Further writes on either end fail; reads
    /// return what is buffered and then end-of-file.
    pub fn close(&self) {
        self.tx.close();
        self.rx.close();
    }

    pub fn is_closed(&self) -> bool {
        self.tx.state.lock().unwrap().closed
    }

    /// Bytes waiting to be read on this end.
    pub fn available(&self) -> usize {
        self.rx.state.lock().unwrap().buf.len()
    }
}

impl Write for PipeEnd {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let mut st = self.tx.state.lock().unwrap();
        if st.closed {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe closed"));
        }
        st.buf.extend(buf);
        self.tx.ready.notify_all();
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for PipeEnd {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        let mut st = self.rx.state.lock().unwrap();
        if st.buf.is_empty() && !st.closed {
            st = self.rx.ready.wait_timeout(st, READ_TIMEOUT).unwrap().0;
        }
        if st.buf.is_empty() {
            return if st.closed { Ok(0) } else { Err(io::ErrorKind::TimedOut.into()) };
        }
        let n = out.len().min(st.buf.len());
        for (slot, b) in out.iter_mut().zip(st.buf.drain(..n)) {
            *slot = b;
        }
        Ok(n)
    }
}

/// Opens an OS serial device for use as a bridge port.
pub fn open_serial(path: &str, baud: u32) -> Result<Box<dyn serialport::SerialPort>, BridgeError> {
    serialport::new(path, baud).timeout(READ_TIMEOUT).open().map_err(|e| BridgeError::Transport(format!("{path}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_cross_in_both_directions() {
        let (mut a, mut b) = pipe();
        a.write_all(b"ping").unwrap();
        b.write_all(b"pong!").unwrap();
        let mut buf = [0u8; 8];
        assert_eq!(b.read(&mut buf).unwrap(), 4);
        assert_eq!(&buf[..4], b"ping");
        assert_eq!(a.read(&mut buf).unwrap(), 5);
        assert_eq!(&buf[..5], b"pong!");
    }

    #[test]
    fn empty_read_times_out_and_close_ends_stream() {
        let (a, mut b) = pipe();
        let mut buf = [0u8; 4];
        assert_eq!(b.read(&mut buf).unwrap_err().kind(), io::ErrorKind::TimedOut);
        a.clone().write_all(b"x").unwrap();
        a.close();
        assert_eq!(b.read(&mut buf).unwrap(), 1);
        assert_eq!(b.read(&mut buf).unwrap(), 0);
        assert!(b.write(b"y").is_err());
    }

    #[test]
    fn missing_serial_device_is_a_transport_error() {
        assert!(matches!(open_serial("/dev/does-not-exist-oec", 115_200), Err(BridgeError::Transport(_))));
    }
}
