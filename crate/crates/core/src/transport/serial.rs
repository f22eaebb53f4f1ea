//! Serial device backend (a paired Bluetooth port shows up as one).

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::os::fd::AsRawFd;
use std::os::unix::fs::OpenOptionsExt;
use std::time::Duration;

use super::stream::{ByteReader, ByteWriter, StreamLink};
use super::{Result, TransportError};

/// Line settings. Only 8N1 framing is supported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerialSettings {
    pub baud: u32,
    pub hardware_flow_control: bool,
}

impl Default for SerialSettings {
    fn default() -> Self {
        Self {
            baud: 115_200,
            hardware_flow_control: false,
        }
    }
}

fn baud_constant(baud: u32) -> Option<libc::speed_t> {
    Some(match baud {
        9600 => libc::B9600,
        19_200 => libc::B19200,
        38_400 => libc::B38400,
        57_600 => libc::B57600,
        115_200 => libc::B115200,
        230_400 => libc::B230400,
        460_800 => libc::B460800,
        921_600 => libc::B921600,
        _ => return None,
    })
}

fn configure(file: &File, settings: &SerialSettings) -> io::Result<()> {
    let fd = file.as_raw_fd();
    // SAFETY: fd is a valid open descriptor owned by `file`.
    if unsafe { libc::isatty(fd) } != 1 {
        return Ok(());
    }
    let speed = baud_constant(settings.baud)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("unsupported baud {}", settings.baud)))?;
    // SAFETY: termios is plain data, filled by tcgetattr before use.
    let mut tio: libc::termios = unsafe { std::mem::zeroed() };
    if unsafe { libc::tcgetattr(fd, &mut tio) } != 0 {
        return Err(io::Error::last_os_error());
    }
    unsafe {
        libc::cfmakeraw(&mut tio);
        libc::cfsetispeed(&mut tio, speed);
        libc::cfsetospeed(&mut tio, speed);
    }
    tio.c_cflag &= !(libc::CSIZE | libc::PARENB | libc::CSTOPB);
    tio.c_cflag |= libc::CS8 | libc::CLOCAL | libc::CREAD;
    if settings.hardware_flow_control {
        tio.c_cflag |= libc::CRTSCTS;
    } else {
        tio.c_cflag &= !libc::CRTSCTS;
    }
    tio.c_iflag &= !(libc::IXON | libc::IXOFF | libc::IXANY);
    tio.c_cc[libc::VMIN] = 0;
    tio.c_cc[libc::VTIME] = 0;
    if unsafe { libc::tcsetattr(fd, libc::TCSANOW, &tio) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

struct SerialReader(File);

impl ByteReader for SerialReader {
    fn read_timeout(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize> {
        let mut pfd = libc::pollfd {
            fd: self.0.as_raw_fd(),
            events: libc::POLLIN,
            revents: 0,
        };
        let ms = timeout.as_millis().clamp(1, i32::MAX as u128) as i32;
        // SAFETY: pfd points to one initialized pollfd.
        let ready = unsafe { libc::poll(&mut pfd, 1, ms) };
        if ready < 0 {
            return Err(io::Error::last_os_error());
        }
        if ready == 0 {
            return Err(io::ErrorKind::TimedOut.into());
        }
        if pfd.revents & libc::POLLIN == 0 && pfd.revents & (libc::POLLHUP | libc::POLLERR) != 0 {
            return Ok(0);
        }
        match self.0.read(buf) {
            Err(e) if e.raw_os_error() == Some(libc::EIO) => Ok(0),
            other => other,
        }
    }
}

struct SerialWriter(File);

impl ByteWriter for SerialWriter {
    fn write_all_bytes(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.write_all(bytes)?;
        self.0.flush()
    }
}

pub(super) fn open(path: &str, settings: &SerialSettings) -> Result<StreamLink> {
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .custom_flags(libc::O_NOCTTY | libc::O_NONBLOCK)
        .open(path)
        .map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => TransportError::NoSuchDevice(path.to_string()),
            io::ErrorKind::PermissionDenied => TransportError::Refused(format!("{path}: permission denied")),
            _ => TransportError::Io(e),
        })?;
    // back to blocking I/O; reads are bounded by poll()
    // SAFETY: fcntl on a valid descriptor.
    unsafe {
        let fd = file.as_raw_fd();
        let flags = libc::fcntl(fd, libc::F_GETFL);
        libc::fcntl(fd, libc::F_SETFL, flags & !libc::O_NONBLOCK);
    }
    configure(&file, settings)?;
    let reader = file.try_clone()?;
    Ok(StreamLink::new(Box::new(SerialReader(reader)), Box::new(SerialWriter(file))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Link;
    use std::ffi::CStr;

    /// Open a pseudo-terminal pair; returns the master and the slave path.
    fn pty() -> (File, String) {
        use std::os::fd::FromRawFd;
        unsafe {
            let master = libc::posix_openpt(libc::O_RDWR | libc::O_NOCTTY);
            assert!(master >= 0);
            assert_eq!(libc::grantpt(master), 0);
            assert_eq!(libc::unlockpt(master), 0);
            let name = CStr::from_ptr(libc::ptsname(master)).to_string_lossy().into_owned();
            (File::from_raw_fd(master), name)
        }
    }

    #[test]
    fn missing_device() {
        assert!(matches!(
            open("/dev/does-not-exist-brick", &SerialSettings::default()),
            Err(TransportError::NoSuchDevice(_))
        ));
    }

    #[test]
    fn frames_over_a_pty() {
        let (mut master, path) = pty();
        let link = open(&path, &SerialSettings::default()).unwrap();
        link.send_frame(&[0x80, 0x0D]).unwrap();
        let mut buf = [0u8; 4];
        master.read_exact(&mut buf).unwrap();
        assert_eq!(buf, [0x02, 0x00, 0x80, 0x0D]);

        master.write_all(&[0x03, 0x00, 0x02, 0x0B, 0x00]).unwrap();
        assert_eq!(link.recv_frame(Duration::from_secs(2)).unwrap(), [0x02, 0x0B, 0x00]);
        assert!(matches!(
            link.recv_frame(Duration::from_millis(20)),
            Err(TransportError::RecvTimeout)
        ));
    }

    #[test]
    fn unsupported_baud() {
        let (_master, path) = pty();
        let settings = SerialSettings {
            baud: 1234,
            ..SerialSettings::default()
        };
        assert!(open(&path, &settings).is_err());
    }
}
