mod major;
mod minor;
