#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>

#include "usbb/bytes.hpp"

namespace usbb::blockdev {

inline constexpr std::size_t kSectorSize = 512;
inline constexpr std::uint64_t kMinSectors = 128;
inline constexpr std::uint64_t kMaxSectors = 0xFFFFFFFFull;

using Sector = std::array<std::uint8_t, kSectorSize>;

// Anything that stores 512-byte logical blocks. Implemented by BlockImage
// (direct image access) and by the mass-storage host handle (through USB).
class BlockDevice {
 public:
  virtual ~BlockDevice() = default;

  virtual std::uint64_t sector_count() const = 0;
  virtual bool read_only() const = 0;
  // out.size() must equal count * 512.
  virtual void read(std::uint64_t lba, std::uint32_t count, MutableByteSpan out) = 0;
  // data.size() must equal count * 512.
  virtual void write(std::uint64_t lba, std::uint32_t count, ByteSpan data) = 0;
  virtual void flush() = 0;
};

/// A raw, flat disk image: the byte offset of sector L is L * 512.
///
/// Writes land in an in-memory dirty-sector buffer and reach the file on
/// flush(). discard_unflushed() drops that buffer, which is what yanking a
/// drive mid-write looks like from the medium's side.
class BlockImage final : public BlockDevice {
 public:
  static std::unique_ptr<BlockImage> create(const std::filesystem::path& path,
                                            std::uint64_t sector_count);
  static std::unique_ptr<BlockImage> open(const std::filesystem::path& path,
                                          bool read_only = false);

  BlockImage(const BlockImage&) = delete;
  BlockImage& operator=(const BlockImage&) = delete;
  ~BlockImage() override;

  const std::filesystem::path& path() const { return path_; }
  std::uint64_t sector_count() const override { return sector_count_; }
  bool read_only() const override { return read_only_; }

  Sector read_sector(std::uint64_t lba) const;
  void write_sector(std::uint64_t lba, std::span<const std::uint8_t, kSectorSize> data);

  void read(std::uint64_t lba, std::uint32_t count, MutableByteSpan out) override;
  void write(std::uint64_t lba, std::uint32_t count, ByteSpan data) override;
  void flush() override;

  void discard_unflushed();
  std::size_t dirty_sectors() const;

 private:
  BlockImage(std::filesystem::path path, int fd, std::uint64_t sector_count, bool read_only);

  void check_range(std::uint64_t lba, std::uint64_t count) const;
  void read_locked(std::uint64_t lba, std::uint32_t count, MutableByteSpan out) const;
  void flush_locked();

  std::filesystem::path path_;
  int fd_ = -1;
  std::uint64_t sector_count_ = 0;
  bool read_only_ = false;

  mutable std::mutex mutex_;
  std::map<std::uint64_t, Sector> dirty_;
};

}  // namespace usbb::blockdev
