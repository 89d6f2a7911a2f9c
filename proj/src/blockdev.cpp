#include "usbb/blockdev.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <string>

#include "usbb/error.hpp"

namespace usbb::blockdev {

namespace {

std::string errno_text(const std::filesystem::path& path) {
  return path.string() + ": " + std::strerror(errno);
}

void pread_all(int fd, std::uint8_t* dst, std::size_t len, off_t off,
               const std::filesystem::path& path) {
  while (len > 0) {
    ssize_t n = ::pread(fd, dst, len, off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::kIoFailure, errno_text(path));
    }
    if (n == 0) throw Error(ErrorCode::kIoFailure, path.string() + ": short read");
    dst += n;
    len -= static_cast<std::size_t>(n);
    off += n;
  }
}

void pwrite_all(int fd, const std::uint8_t* src, std::size_t len, off_t off,
                const std::filesystem::path& path) {
  while (len > 0) {
    ssize_t n = ::pwrite(fd, src, len, off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::kIoFailure, errno_text(path));
    }
    src += n;
    len -= static_cast<std::size_t>(n);
    off += n;
  }
}

}  // namespace

std::unique_ptr<BlockImage> BlockImage::create(const std::filesystem::path& path,
                                               std::uint64_t sector_count) {
  if (sector_count < kMinSectors || sector_count > kMaxSectors) {
    throw Error(ErrorCode::kSizeOutOfRange,
                std::to_string(sector_count) + " sectors (allowed 128..4294967295)");
  }
  int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_EXCL | O_CLOEXEC, 0644);
  if (fd < 0) {
    if (errno == EEXIST) throw Error(ErrorCode::kPathExists, path.string());
    throw Error(ErrorCode::kIoFailure, errno_text(path));
  }
  if (::ftruncate(fd, static_cast<off_t>(sector_count * kSectorSize)) != 0) {
    auto msg = errno_text(path);
    ::close(fd);
    ::unlink(path.c_str());
    throw Error(ErrorCode::kIoFailure, msg);
  }
  return std::unique_ptr<BlockImage>(new BlockImage(path, fd, sector_count, false));
}

std::unique_ptr<BlockImage> BlockImage::open(const std::filesystem::path& path, bool read_only) {
  int fd = ::open(path.c_str(), (read_only ? O_RDONLY : O_RDWR) | O_CLOEXEC);
  if (fd < 0) {
    if (errno == ENOENT) throw Error(ErrorCode::kNotFound, path.string());
    throw Error(ErrorCode::kIoFailure, errno_text(path));
  }
  struct stat st {};
  if (::fstat(fd, &st) != 0) {
    auto msg = errno_text(path);
    ::close(fd);
    throw Error(ErrorCode::kIoFailure, msg);
  }
  auto size = static_cast<std::uint64_t>(st.st_size);
  std::uint64_t sectors = size / kSectorSize;
  if (size % kSectorSize != 0 || sectors < kMinSectors || sectors > kMaxSectors) {
    ::close(fd);
    throw Error(ErrorCode::kSizeOutOfRange,
                path.string() + ": length " + std::to_string(size) +
                    " is not a whole number of 512-byte sectors in range");
  }
  return std::unique_ptr<BlockImage>(new BlockImage(path, fd, sectors, read_only));
}

BlockImage::BlockImage(std::filesystem::path path, int fd, std::uint64_t sector_count,
                       bool read_only)
    : path_(std::move(path)), fd_(fd), sector_count_(sector_count), read_only_(read_only) {}

BlockImage::~BlockImage() {
  try {
    std::lock_guard lock(mutex_);
    flush_locked();
  } catch (const Error&) {
  }
  if (fd_ >= 0) ::close(fd_);
}

void BlockImage::check_range(std::uint64_t lba, std::uint64_t count) const {
  if (lba >= sector_count_ || count > sector_count_ - lba) {
    throw Error(ErrorCode::kLbaOutOfRange, "lba " + std::to_string(lba) + " count " +
                                               std::to_string(count) + " beyond " +
                                               std::to_string(sector_count_) + " sectors");
  }
}

Sector BlockImage::read_sector(std::uint64_t lba) const {
  Sector out{};
  std::lock_guard lock(mutex_);
  check_range(lba, 1);
  read_locked(lba, 1, out);
  return out;
}

void BlockImage::write_sector(std::uint64_t lba, std::span<const std::uint8_t, kSectorSize> data) {
  write(lba, 1, data);
}

void BlockImage::read(std::uint64_t lba, std::uint32_t count, MutableByteSpan out) {
  if (out.size() != static_cast<std::size_t>(count) * kSectorSize) {
    throw Error(ErrorCode::kInvalidArgument, "read buffer size mismatch");
  }
  if (count == 0) return;
  std::lock_guard lock(mutex_);
  check_range(lba, count);
  read_locked(lba, count, out);
}

void BlockImage::read_locked(std::uint64_t lba, std::uint32_t count, MutableByteSpan out) const {
  pread_all(fd_, out.data(), out.size(), static_cast<off_t>(lba * kSectorSize), path_);
  if (dirty_.empty()) return;
  for (auto it = dirty_.lower_bound(lba); it != dirty_.end() && it->first < lba + count; ++it) {
    std::memcpy(out.data() + (it->first - lba) * kSectorSize, it->second.data(), kSectorSize);
  }
}

void BlockImage::write(std::uint64_t lba, std::uint32_t count, ByteSpan data) {
  if (data.size() != static_cast<std::size_t>(count) * kSectorSize) {
    throw Error(ErrorCode::kInvalidArgument, "write buffer size mismatch");
  }
  std::lock_guard lock(mutex_);
  if (read_only_) throw Error(ErrorCode::kReadOnlyViolation, path_.string());
  if (count == 0) return;
  check_range(lba, count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto& slot = dirty_[lba + i];
    std::memcpy(slot.data(), data.data() + static_cast<std::size_t>(i) * kSectorSize, kSectorSize);
  }
}

void BlockImage::flush() {
  std::lock_guard lock(mutex_);
  flush_locked();
}

void BlockImage::flush_locked() {
  if (dirty_.empty()) return;
  // Coalesce contiguous dirty sectors into single writes.
  Bytes run;
  std::uint64_t run_start = 0;
  std::uint64_t expected = 0;
  auto emit = [&] {
    if (!run.empty()) {
      pwrite_all(fd_, run.data(), run.size(), static_cast<off_t>(run_start * kSectorSize), path_);
      run.clear();
    }
  };
  for (const auto& [lba, sector] : dirty_) {
    if (run.empty() || lba != expected) {
      emit();
      run_start = lba;
    }
    run.insert(run.end(), sector.begin(), sector.end());
    expected = lba + 1;
  }
  emit();
  dirty_.clear();
  if (::fdatasync(fd_) != 0 && errno != EINVAL) {
    throw Error(ErrorCode::kIoFailure, errno_text(path_));
  }
}

void BlockImage::discard_unflushed() {
  std::lock_guard lock(mutex_);
  dirty_.clear();
}

std::size_t BlockImage::dirty_sectors() const {
  std::lock_guard lock(mutex_);
  return dirty_.size();
}

}  // namespace usbb::blockdev
