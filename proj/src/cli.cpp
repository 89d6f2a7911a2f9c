#include <csignal>
#include <cstdio>
#include <iostream>
#include <pthread.h>

#include <CLI11.hpp>

#include "usbb/gateway.hpp"

namespace usbb::gateway {

namespace {

namespace fs = std::filesystem;
using bridge::PortState;
using bridge::PortStatus;

fat::Clock clock_from_env() {
  const char* fixed = std::getenv("USBBRIDGE_FIXED_TIME");
  if (fixed == nullptr || *fixed == '\0') return {};
  auto tp = std::chrono::system_clock::time_point(std::chrono::seconds(std::stoll(fixed)));
  return [tp] { return tp; };
}

std::shared_ptr<bridge::Bridge> make_bridge() {
  bridge::BridgeOptions opts;
  opts.clock = clock_from_env();
  return bridge::Bridge::create(std::move(opts));
}

usb::Port port_of(const std::string& text) {
  auto p = usb::parse_port(text);
  if (!p) throw CLI::ValidationError("port", "expected A or B, got '" + text + "'");
  return *p;
}

bridge::Location location_of(const std::string& text) {
  auto colon = text.find(':');
  if (colon == std::string::npos || colon + 1 == text.size()) {
    throw CLI::ValidationError("location", "expected PORT:/path, got '" + text + "'");
  }
  return {port_of(text.substr(0, colon)), text.substr(colon + 1)};
}

std::uint64_t parse_size(const std::string& text) {
  std::size_t used = 0;
  std::uint64_t n = 0;
  try {
    n = std::stoull(text, &used);
  } catch (const std::exception&) {
    throw CLI::ValidationError("--size", "not a size: " + text);
  }
  std::string unit = text.substr(used);
  if (unit == "K" || unit == "k") {
    n <<= 10;
  } else if (unit == "M" || unit == "m") {
    n <<= 20;
  } else if (unit == "G" || unit == "g") {
    n <<= 30;
  } else if (unit == "s") {
    n *= blockdev::kSectorSize;
  } else if (!unit.empty()) {
    throw CLI::ValidationError("--size", "unknown unit in " + text);
  }
  if (n % blockdev::kSectorSize != 0) {
    throw CLI::ValidationError("--size", "not a multiple of 512 bytes: " + text);
  }
  return n;
}

std::string describe(const PortState& s) {
  std::string out = std::string(usb::to_string(s.port)) + ": " + std::string(bridge::to_string(s.status));
  if (s.volume) {
    out += " " + std::string(fat::to_string(s.volume->variant)) + " \"" + s.volume->label + "\" " +
           std::to_string(s.volume->free_bytes) + " of " + std::to_string(s.volume->total_bytes) +
           " bytes free";
  }
  if (s.read_only) out += " read-only";
  if (!s.image.empty()) out += " (" + s.image + ")";
  if (s.error) out += "\n  " + *s.error;
  return out;
}

std::string progress_line(const bridge::TransferJob& j) {
  return j.id + " " + std::string(bridge::to_string(j.state)) + " " + std::to_string(j.copied_bytes) +
         "/" + std::to_string(j.total_bytes) + " bytes " + std::to_string(j.copied_files) + "/" +
         std::to_string(j.total_files) + " files";
}

// Plugs the recorded image into `port` and requires it to mount.
std::shared_ptr<bridge::Bridge> ready_bridge(const StateFile& state, const std::vector<usb::Port>& ports) {
  auto b = make_bridge();
  restore(*b, state, ports);
  for (usb::Port p : ports) {
    auto s = b->port_state(p);
    if (s.status == PortStatus::kReady) continue;
    std::string why = s.error ? " (" + *s.error + ")" : "";
    throw Error(ErrorCode::kPortNotReady,
                "port " + std::string(usb::to_string(p)) + " is " + std::string(bridge::to_string(s.status)) + why);
  }
  return b;
}

int serve(const StateFile& state, const std::string& listen, std::ostream& out) {
  ServerOptions opts;
  auto colon = listen.rfind(':');
  if (colon == std::string::npos) throw CLI::ValidationError("--listen", "expected host:port");
  opts.host = listen.substr(0, colon);
  try {
    opts.port = std::stoi(listen.substr(colon + 1));
  } catch (const std::exception&) {
    throw CLI::ValidationError("--listen", "bad port in " + listen);
  }

  // Block the stop signals before any thread starts so only sigwait sees them.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  auto b = make_bridge();
  auto file = std::make_shared<StateFile>(state.path());
  restore(*b, *file);
  auto api = std::make_shared<ApiService>(b, file);
  HttpServer server(api);
  int port = server.start(opts);
  out << "listening on http://" << opts.host << ":" << port << std::endl;
  int sig = 0;
  sigwait(&stop_signals, &sig);
  server.stop();
  return kExitOk;
}

}  // namespace

int exit_code_for(ErrorCode code, bool transfer) {
  switch (code) {
    case ErrorCode::kNotFound:
    case ErrorCode::kUnknownJob:
      return kExitNotFound;
    case ErrorCode::kSamePort:
    case ErrorCode::kInvalidArgument:
      return kExitUsage;
    case ErrorCode::kPortNotReady:
    case ErrorCode::kPortEmpty:
    case ErrorCode::kPortOccupied:
      return kExitDevice;
    default:
      return transfer ? kExitTransfer : kExitDevice;
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-port USB mass-storage bridge", "usbbridge"};
  app.require_subcommand(1);
  std::string state_path;
  app.add_option("--state", state_path, "Port state file (default $USBBRIDGE_STATE or ./.usbbridge.json)");

  std::string port_text, image, path = "/", src_text, dst_text, variant_text, size_text, label = "NO NAME",
                         listen = "127.0.0.1:8080";
  bool read_only = false, overwrite = false, recursive = false;
  int spc = 0;

  auto* attach = app.add_subcommand("attach", "Plug an image into a port");
  attach->add_option("port", port_text, "A or B")->required();
  attach->add_option("image", image, "Disk image")->required();
  attach->add_flag("--read-only", read_only, "Write-protect the drive");

  auto* detach = app.add_subcommand("detach", "Unplug a port");
  detach->add_option("port", port_text, "A or B")->required();

  auto* mkfs = app.add_subcommand("mkfs", "Format an image");
  mkfs->add_option("image", image, "Disk image")->required();
  mkfs->add_option("--variant", variant_text, "fat16 or fat32")->required();
  mkfs->add_option("--spc", spc, "Sectors per cluster");
  mkfs->add_option("--label", label, "Volume label");
  mkfs->add_option("--size", size_text, "Create the image with this size (bytes, or K/M/G/s suffix)");

  auto* ls = app.add_subcommand("ls", "List a directory");
  ls->add_option("port", port_text, "A or B")->required();
  ls->add_option("path", path, "Directory");

  auto* info = app.add_subcommand("info", "Show the volume on a port");
  info->add_option("port", port_text, "A or B")->required();

  auto* cp = app.add_subcommand("cp", "Copy between ports");
  cp->add_option("src", src_text, "PORT:/path")->required();
  cp->add_option("dst", dst_text, "PORT:/path")->required();
  cp->add_flag("--overwrite", overwrite, "Replace an existing destination");
  cp->add_flag("--recursive", recursive, "Copy a directory tree");

  auto* fsck = app.add_subcommand("fsck", "Check an image for consistency");
  fsck->add_option("image", image, "Disk image")->required();

  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("--listen", listen, "host:port");

  std::vector<const char*> argv{"usbbridge"};
  for (const auto& a : args) argv.push_back(a.c_str());

  bool transfer = false;
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
    StateFile state(state_path.empty() ? StateFile::default_path() : fs::path(state_path));

    if (*attach) {
      usb::Port port = port_of(port_text);
      auto entries = state.load();
      if (entries.count(port)) {
        throw Error(ErrorCode::kPortOccupied, "port " + port_text + " holds " + entries[port].image);
      }
      auto abs = fs::absolute(image);
      auto b = make_bridge();
      b->attach_image(port, abs, read_only);
      auto s = b->wait_settled(port);
      state.set(port, StateFile::Entry{abs.string(), read_only});
      out << describe(s) << "\n";
      return s.status == PortStatus::kReady ? kExitOk : kExitDevice;
    }

    if (*detach) {
      usb::Port port = port_of(port_text);
      if (!state.load().count(port)) throw Error(ErrorCode::kPortEmpty, "port " + port_text);
      state.set(port, std::nullopt);
      out << usb::to_string(port) << ": empty\n";
      return kExitOk;
    }

    if (*mkfs) {
      auto variant = fat::parse_variant(variant_text);
      if (!variant) throw CLI::ValidationError("--variant", "expected fat16 or fat32");
      if (spc < 0 || spc > 128) throw CLI::ValidationError("--spc", "out of range");
      std::shared_ptr<blockdev::BlockImage> img;
      if (!size_text.empty()) {
        img = blockdev::BlockImage::create(image, parse_size(size_text) / blockdev::kSectorSize);
      } else {
        img = blockdev::BlockImage::open(image);
      }
      fat::MkfsParams params;
      params.sectors_per_cluster = static_cast<std::uint8_t>(spc);
      params.volume_label = label;
      auto vol = fat::mkfs(img, *variant, params, clock_from_env());
      auto vi = vol->info();
      out << image << ": " << fat::to_string(vi.variant) << ", " << vi.cluster_count << " clusters of "
          << vi.bytes_per_cluster << " bytes, label \"" << vi.label << "\"\n";
      return kExitOk;
    }

    if (*ls) {
      usb::Port port = port_of(port_text);
      auto b = ready_bridge(state, {port});
      auto listing = b->browse(port, path);
      for (const auto& e : listing.entries) {
        char line[64];
        if (e.is_directory()) {
          std::snprintf(line, sizeof line, "d %12s  ", "-");
          out << line << e.name() << "/\n";
        } else {
          std::snprintf(line, sizeof line, "- %12u  ", e.size_bytes);
          out << line << e.name() << "\n";
        }
      }
      return kExitOk;
    }

    if (*info) {
      usb::Port port = port_of(port_text);
      auto b = make_bridge();
      restore(*b, state, {port});
      auto s = b->port_state(port);
      out << "port: " << usb::to_string(port) << "\n"
          << "status: " << bridge::to_string(s.status) << "\n";
      if (!s.image.empty()) out << "image: " << s.image << (s.read_only ? " (read-only)" : "") << "\n";
      if (s.error) out << "error: " << *s.error << "\n";
      if (s.volume) {
        const auto& v = *s.volume;
        out << "variant: " << fat::to_string(v.variant) << "\n"
            << "label: " << v.label << "\n"
            << "cluster_size: " << v.bytes_per_cluster << "\n"
            << "clusters: " << v.cluster_count << "\n"
            << "free_clusters: " << v.free_clusters << "\n"
            << "total_bytes: " << v.total_bytes << "\n"
            << "free_bytes: " << v.free_bytes << "\n";
      }
      return s.status == PortStatus::kReady ? kExitOk : kExitDevice;
    }

    if (*cp) {
      transfer = true;
      bridge::CopyRequest req{location_of(src_text), location_of(dst_text), overwrite, recursive};
      auto b = ready_bridge(state, {req.src.port, req.dst.port});
      auto sub = b->subscribe();
      auto job = b->start_copy(req);
      std::uint64_t shown = 0;
      while (!bridge::is_terminal(job.state)) {
        auto ev = sub->next(std::chrono::seconds(1));
        if (!ev) {
          job = b->job_status(job.id);
          continue;
        }
        if (!ev->job || ev->job->id != job.id) continue;
        job = *ev->job;
        if (job.state == bridge::JobState::kRunning && job.copied_bytes > shown) {
          shown = job.copied_bytes;
          out << progress_line(job) << "\n";
        }
      }
      out << progress_line(job) << "\n";
      if (job.state != bridge::JobState::kDone) {
        err << "error: " << job.error.value_or("cancelled") << "\n";
        return kExitTransfer;
      }
      return kExitOk;
    }

    if (*fsck) {
      std::shared_ptr<blockdev::BlockImage> img = blockdev::BlockImage::open(image, true);
      auto report = fat::check(*img);
      for (const auto& f : report.findings) out << f.format() << "\n";
      out << image << ": " << report.errors() << " errors, " << report.findings.size() - report.errors()
          << " warnings; " << report.clusters_in_use << " clusters in use, " << report.free_clusters
          << " free, " << report.lost_clusters << " lost\n";
      return report.errors() == 0 ? kExitOk : kExitDevice;
    }

    if (*serve_cmd) return serve(state, listen, out);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitUsage;
  } catch (const Error& e) {
    err << "error: " << bridge::error_text(e) << "\n";
    return exit_code_for(e.code(), transfer);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDevice;
  }
  return kExitUsage;
}

}  // namespace usbb::gateway
