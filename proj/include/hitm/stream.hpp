#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <arpa/inet.h>
#include <cerrno>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include "hitm/attack.hpp"
#include "hitm/detector.hpp"
#include "hitm/nms.hpp"
#include "hitm/ppm.hpp"
#include "hitm/tensor.hpp"

// Human-in-the-Middle frame pipeline: a camera stand-in (source), an injector
// that adds the perturbation in transit, and a detection stand-in (sink),
// connected by a framed byte protocol over pipes, TCP, or in-process memory
// pipes. The injector is the attack surface: neither endpoint changes when it
// appears between them.
//
// Wire format per frame, all integers little-endian:
//   "HITM" (4) | version u8 = 1 | width u32 | height u32 | index u64 | RGB24

namespace hitm::stream {

inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderBytes = 21;

/// Blocking byte transport. read_all returns false only on a clean EOF
/// before the first requested byte; anything partial throws.
class ByteStream {
  public:
    virtual ~ByteStream() = default;
    virtual void write_all(const void* data, std::size_t n) = 0;
    virtual bool read_all(void* data, std::size_t n) = 0;
};

/// Transport over POSIX file descriptors (pipes or a connected socket).
class FdStream final : public ByteStream {
  public:
    FdStream(int read_fd, int write_fd, bool owns_fds = false)
        : read_fd_(read_fd), write_fd_(write_fd), owns_(owns_fds) {}
    FdStream(const FdStream&) = delete;
    FdStream& operator=(const FdStream&) = delete;
    ~FdStream() override {
        if (!owns_) return;
        if (read_fd_ >= 0) ::close(read_fd_);
        if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    }

    void write_all(const void* data, std::size_t n) override {
        const char* p = static_cast<const char*>(data);
        while (n > 0) {
            const ssize_t w = ::write(write_fd_, p, n);
            if (w < 0) {
                if (errno == EINTR) continue;
                throw std::runtime_error(std::string("stream write: ") +
                                         std::strerror(errno));
            }
            p += w;
            n -= static_cast<std::size_t>(w);
        }
    }

    bool read_all(void* data, std::size_t n) override {
        char* p = static_cast<char*>(data);
        std::size_t got = 0;
        while (got < n) {
            const ssize_t r = ::read(read_fd_, p + got, n - got);
            if (r < 0) {
                if (errno == EINTR) continue;
                throw std::runtime_error(std::string("stream read: ") +
                                         std::strerror(errno));
            }
            if (r == 0) {
                if (got == 0) return false;
                throw std::runtime_error("stream read: truncated (got " +
                                         std::to_string(got) + " of " +
                                         std::to_string(n) + " bytes)");
            }
            got += static_cast<std::size_t>(r);
        }
        return true;
    }

  private:
    int read_fd_, write_fd_;
    bool owns_;
};

/// Bounded in-process byte pipe for single-process demos and tests. Writers
/// block when the buffer is full, which models the synchronous capture
/// pipeline: a slow consumer stalls the producer instead of queueing frames.
class MemoryPipe final : public ByteStream {
  public:
    explicit MemoryPipe(std::size_t capacity = 1 << 16) : capacity_(capacity) {}

    void write_all(const void* data, std::size_t n) override {
        const auto* p = static_cast<const unsigned char*>(data);
        std::unique_lock lock(mutex_);
        while (n > 0) {
            space_.wait(lock, [&] { return buffer_.size() < capacity_ || closed_; });
            if (closed_) throw std::runtime_error("memory pipe: write after close");
            const std::size_t room =
                std::min(n, capacity_ - buffer_.size());
            buffer_.insert(buffer_.end(), p, p + room);
            p += room;
            n -= room;
            bytes_.notify_one();
        }
    }

    bool read_all(void* data, std::size_t n) override {
        auto* p = static_cast<unsigned char*>(data);
        std::size_t got = 0;
        std::unique_lock lock(mutex_);
        while (got < n) {
            bytes_.wait(lock, [&] { return !buffer_.empty() || closed_; });
            if (buffer_.empty()) {
                if (got == 0) return false;
                throw std::runtime_error("memory pipe: truncated read");
            }
            const std::size_t take = std::min(n - got, buffer_.size());
            std::copy_n(buffer_.begin(), take, p + got);
            buffer_.erase(buffer_.begin(),
                          buffer_.begin() + static_cast<std::ptrdiff_t>(take));
            got += take;
            space_.notify_one();
        }
        return true;
    }

    void close_write() {
        std::lock_guard lock(mutex_);
        closed_ = true;
        bytes_.notify_all();
        space_.notify_all();
    }

  private:
    std::mutex mutex_;
    std::condition_variable bytes_, space_;
    std::deque<unsigned char> buffer_;
    std::size_t capacity_;
    bool closed_ = false;
};

struct FrameHeader {
    std::uint8_t version = kProtocolVersion;
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint64_t frame_index = 0;
};

struct Frame {
    FrameHeader header;
    std::vector<unsigned char> rgb;  // interleaved RGB24, row-major
};

inline void write_frame(ByteStream& out, const Frame& frame) {
    const std::size_t payload = static_cast<std::size_t>(frame.header.width) *
                                frame.header.height * 3;
    if (frame.rgb.size() != payload)
        throw std::logic_error("write_frame: payload is " +
                               std::to_string(frame.rgb.size()) +
                               " bytes, header implies " +
                               std::to_string(payload));
    unsigned char h[kHeaderBytes];
    std::memcpy(h, "HITM", 4);
    h[4] = frame.header.version;
    for (int i = 0; i < 4; ++i)
        h[5 + i] = static_cast<unsigned char>(frame.header.width >> (8 * i));
    for (int i = 0; i < 4; ++i)
        h[9 + i] = static_cast<unsigned char>(frame.header.height >> (8 * i));
    for (int i = 0; i < 8; ++i)
        h[13 + i] =
            static_cast<unsigned char>(frame.header.frame_index >> (8 * i));
    out.write_all(h, kHeaderBytes);
    out.write_all(frame.rgb.data(), frame.rgb.size());
}

/// Reads the next frame; false on clean end of stream, throws on anything
/// malformed or truncated.
inline bool read_frame(ByteStream& in, Frame& frame) {
    unsigned char h[kHeaderBytes];
    if (!in.read_all(h, kHeaderBytes)) return false;
    if (std::memcmp(h, "HITM", 4) != 0)
        throw std::runtime_error("stream: bad frame magic");
    frame.header.version = h[4];
    if (frame.header.version != kProtocolVersion)
        throw std::runtime_error("stream: unsupported protocol version " +
                                 std::to_string(frame.header.version));
    frame.header.width = frame.header.height = 0;
    for (int i = 0; i < 4; ++i)
        frame.header.width |= static_cast<std::uint32_t>(h[5 + i]) << (8 * i);
    for (int i = 0; i < 4; ++i)
        frame.header.height |= static_cast<std::uint32_t>(h[9 + i]) << (8 * i);
    frame.header.frame_index = 0;
    for (int i = 0; i < 8; ++i)
        frame.header.frame_index |= static_cast<std::uint64_t>(h[13 + i])
                                    << (8 * i);
    if (frame.header.width == 0 || frame.header.height == 0 ||
        frame.header.width > (1u << 20) || frame.header.height > (1u << 20))
        throw std::runtime_error("stream: implausible frame dimensions " +
                                 std::to_string(frame.header.width) + "x" +
                                 std::to_string(frame.header.height));
    frame.rgb.resize(static_cast<std::size_t>(frame.header.width) *
                     frame.header.height * 3);
    if (!in.read_all(frame.rgb.data(), frame.rgb.size()))
        throw std::runtime_error("stream: truncated payload for frame " +
                                 std::to_string(frame.header.frame_index));
    return true;
}

// ------------------------------------------------------------------ roles

struct SourceReport {
    std::uint64_t frames = 0;
};

/// Emits the given images as a frame stream, indices increasing from 0,
/// throttled to fps_limit when positive.
inline SourceReport run_source(const std::vector<Tensor>& images,
                               ByteStream& out, double fps_limit = 0.0) {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    SourceReport report;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (fps_limit > 0.0)
            std::this_thread::sleep_until(
                start + std::chrono::duration_cast<clock::duration>(
                            std::chrono::duration<double>(i / fps_limit)));
        const Tensor& img = images[i];
        if (img.rank() != 3 || img.shape[0] != 3)
            throw std::invalid_argument("source: frame " + std::to_string(i) +
                                        " is not a 3xHxW image");
        Frame frame;
        frame.header.width = static_cast<std::uint32_t>(img.shape[2]);
        frame.header.height = static_cast<std::uint32_t>(img.shape[1]);
        frame.header.frame_index = i;
        frame.rgb = to_rgb24(img);
        write_frame(out, frame);
        ++report.frames;
    }
    return report;
}

enum class InjectMode { Static, Online };

struct InjectReport {
    std::uint64_t frames = 0;
    attack::Perturbation perturbation;  // final delta state (online mode)
};

namespace detail {

/// Applies delta in 8-bit pixel space: byte' = clamp(round(b + 255*d), 0, 255)
/// with round-half-away-from-zero — the fidelity an injected 8-bit frame has.
inline void add_delta_bytes(std::vector<unsigned char>& rgb, const Tensor& delta,
                            std::uint32_t width, std::uint32_t height) {
    for (std::uint32_t y = 0; y < height; ++y)
        for (std::uint32_t x = 0; x < width; ++x)
            for (std::uint32_t c = 0; c < 3; ++c) {
                const std::size_t at = (static_cast<std::size_t>(y) * width + x) * 3 + c;
                const double v = rgb[at] + 255.0 * delta.at3(c, y, x);
                rgb[at] = static_cast<unsigned char>(
                    std::clamp(std::round(v), 0.0, 255.0));
            }
}

}  // namespace detail

/// The proxy between source and sink. Static mode adds a fixed delta to each
/// frame; online mode refines delta with one PGD step per frame, computed on
/// the previous frame's clean image, before injecting into the current frame
/// (the first frame gets the initial delta as carried in `p`).
inline InjectReport run_inject(ByteStream& in, ByteStream& out,
                               attack::Perturbation p, InjectMode mode,
                               const det::DetectorWeights* weights = nullptr) {
    if (mode == InjectMode::Online && weights == nullptr)
        throw std::invalid_argument("inject: online mode needs detector weights");
    if (p.delta.rank() != 3 || p.delta.shape[0] != 3)
        throw std::invalid_argument("inject: delta must be 3xHxW");
    const auto dw = static_cast<std::uint32_t>(p.delta.shape[2]);
    const auto dh = static_cast<std::uint32_t>(p.delta.shape[1]);

    InjectReport report;
    Tensor prev_clean;
    double alpha = p.config.alpha;
    Frame frame;
    while (read_frame(in, frame)) {
        if (frame.header.width != dw || frame.header.height != dh)
            throw std::runtime_error(
                "inject: frame " + std::to_string(frame.header.frame_index) +
                " is " + std::to_string(frame.header.width) + "x" +
                std::to_string(frame.header.height) + " but delta is " +
                std::to_string(dw) + "x" + std::to_string(dh));
        if (mode == InjectMode::Online) {
            const Tensor clean =
                from_rgb24(frame.rgb.data(), frame.header.width,
                           frame.header.height);
            if (report.frames > 0) {
                const attack::AdversarialLoss loss =
                    p.config.loss == attack::LossKind::TOG
                        ? attack::AdversarialLoss::make(
                              p.config.loss, p.config.mode,
                              det::forward(*weights, prev_clean))
                        : attack::AdversarialLoss::make(p.config.loss,
                                                        p.config.mode);
                attack::pgd_step(p, prev_clean, *weights, loss, alpha);
                alpha *= p.config.decay;
            }
            prev_clean = clean;
        }
        detail::add_delta_bytes(frame.rgb, p.delta, frame.header.width,
                                frame.header.height);
        write_frame(out, frame);
        ++report.frames;
    }
    report.perturbation = std::move(p);
    return report;
}

struct SinkFrame {
    std::uint64_t frame_index = 0;
    int boxes = 0;
    double mean_confidence = 0.0;  // mean sigmoid objectness over candidates
};

struct SinkReport {
    std::vector<SinkFrame> frames;
    double seconds = 0.0;
    double fps = 0.0;
};

/// The detection-system stand-in: forward + NMS per frame, plus wall-clock
/// throughput over the whole run.
inline SinkReport run_sink(ByteStream& in, const det::DetectorWeights& w,
                           const NmsConfig& nms_cfg = {},
                           std::ostream* log = nullptr) {
    using clock = std::chrono::steady_clock;
    SinkReport report;
    const auto start = clock::now();
    Frame frame;
    while (read_frame(in, frame)) {
        const Tensor image = from_rgb24(frame.rgb.data(), frame.header.width,
                                        frame.header.height);
        const det::RawDetections raw = det::forward(w, image);
        SinkFrame rec;
        rec.frame_index = frame.header.frame_index;
        rec.boxes = static_cast<int>(nms(raw, nms_cfg).size());
        for (double c : raw.confidence) rec.mean_confidence += c;
        rec.mean_confidence /= static_cast<double>(raw.count());
        if (log)
            (*log) << "frame " << rec.frame_index << " boxes=" << rec.boxes
                   << " mean_conf=" << rec.mean_confidence << '\n';
        report.frames.push_back(rec);
    }
    report.seconds =
        std::chrono::duration<double>(clock::now() - start).count();
    if (report.seconds > 0.0)
        report.fps = static_cast<double>(report.frames.size()) / report.seconds;
    return report;
}

// -------------------------------------------------------------------- tcp

/// Splits "host:port"; the port is the part after the last colon.
inline std::pair<std::string, std::uint16_t> parse_endpoint(
    const std::string& endpoint) {
    const std::size_t colon = endpoint.rfind(':');
    if (colon == std::string::npos || colon + 1 == endpoint.size())
        throw std::runtime_error("endpoint '" + endpoint +
                                 "' is not host:port");
    const std::string host = endpoint.substr(0, colon);
    unsigned long port = 0;
    for (char c : endpoint.substr(colon + 1)) {
        if (c < '0' || c > '9')
            throw std::runtime_error("endpoint '" + endpoint +
                                     "' has a non-numeric port");
        port = port * 10 + static_cast<unsigned long>(c - '0');
        if (port > 65535)
            throw std::runtime_error("endpoint '" + endpoint +
                                     "' port out of range");
    }
    if (port == 0)
        throw std::runtime_error("endpoint '" + endpoint + "' port must be > 0");
    return {host.empty() ? "0.0.0.0" : host, static_cast<std::uint16_t>(port)};
}

namespace detail {

inline addrinfo* resolve(const std::string& host, std::uint16_t port,
                         bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    if (passive) hints.ai_flags = AI_PASSIVE;
    addrinfo* result = nullptr;
    const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(),
                                 &hints, &result);
    if (rc != 0)
        throw std::runtime_error("tcp: cannot resolve " + host + ": " +
                                 ::gai_strerror(rc));
    return result;
}

inline void set_nodelay(int fd) {
    int flag = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &flag, sizeof flag);
}

}  // namespace detail

/// Binds, listens, and returns the first accepted connection.
inline int tcp_listen_accept(const std::string& host, std::uint16_t port) {
    addrinfo* addrs = detail::resolve(host, port, true);
    int listen_fd = -1;
    std::string last_error = "no addresses";
    for (addrinfo* a = addrs; a != nullptr; a = a->ai_next) {
        listen_fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
        if (listen_fd < 0) continue;
        int one = 1;
        ::setsockopt(listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        if (::bind(listen_fd, a->ai_addr, a->ai_addrlen) == 0 &&
            ::listen(listen_fd, 1) == 0)
            break;
        last_error = std::strerror(errno);
        ::close(listen_fd);
        listen_fd = -1;
    }
    ::freeaddrinfo(addrs);
    if (listen_fd < 0)
        throw std::runtime_error("tcp: cannot listen on " + host + ":" +
                                 std::to_string(port) + ": " + last_error);
    const int conn = ::accept(listen_fd, nullptr, nullptr);
    ::close(listen_fd);
    if (conn < 0)
        throw std::runtime_error(std::string("tcp accept: ") +
                                 std::strerror(errno));
    detail::set_nodelay(conn);
    return conn;
}

/// Connects with bounded retries so the peer may come up slightly later.
inline int tcp_connect(const std::string& host, std::uint16_t port,
                       int attempts = 50) {
    std::string last_error;
    for (int attempt = 0; attempt < attempts; ++attempt) {
        addrinfo* addrs = detail::resolve(host, port, false);
        for (addrinfo* a = addrs; a != nullptr; a = a->ai_next) {
            const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
            if (fd < 0) continue;
            if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
                ::freeaddrinfo(addrs);
                detail::set_nodelay(fd);
                return fd;
            }
            last_error = std::strerror(errno);
            ::close(fd);
        }
        ::freeaddrinfo(addrs);
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    throw std::runtime_error("tcp: cannot connect to " + host + ":" +
                             std::to_string(port) + ": " + last_error);
}

}  // namespace hitm::stream
