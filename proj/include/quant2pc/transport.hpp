#ifndef QUANT2PC_TRANSPORT_HPP_
#define QUANT2PC_TRANSPORT_HPP_

#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#ifdef _WIN32
#error "POSIX sockets required"
#endif
#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

// Two-party duplex channel with exact byte and round accounting.
// A round is counted on each direction switch of the conversation
// (the first message counts as one). Framing overhead is metered under
// the reserved "__framing" label.

namespace quant2pc {

enum class Party : int { Server = 0, Client = 1 };

inline Party other(Party p) { return p == Party::Server ? Party::Client : Party::Server; }

inline const char* party_name(Party p) { return p == Party::Server ? "server" : "client"; }

inline constexpr const char* kFramingLabel = "__framing";

struct LabelStat {
    uint64_t bytes = 0;
    uint64_t rounds = 0;
    uint64_t ot_instances = 0;  // OT instances charged to this label (sender side)
};

class CommMeter {
public:
    void record_send(Party sender, const std::string& label, uint64_t payload_bytes,
                     uint64_t framing_bytes) {
        std::lock_guard lk(mu_);
        bytes_by_party_[static_cast<int>(sender)] += payload_bytes + framing_bytes;
        bool switched = !any_ || last_sender_ != sender;
        if (switched) ++rounds_;
        auto& st = labels_[label];
        st.bytes += payload_bytes;
        if (switched) ++st.rounds;
        labels_[kFramingLabel].bytes += framing_bytes;
        last_sender_ = sender;
        any_ = true;
    }

    void add_ot_instances(const std::string& label, uint64_t n) {
        std::lock_guard lk(mu_);
        labels_[label].ot_instances += n;
    }
    uint64_t label_ot_instances(const std::string& label) const {
        std::lock_guard lk(mu_);
        auto it = labels_.find(label);
        return it == labels_.end() ? 0 : it->second.ot_instances;
    }

    uint64_t bytes_sent_by(Party p) const {
        std::lock_guard lk(mu_);
        return bytes_by_party_[static_cast<int>(p)];
    }
    uint64_t total_bytes() const {
        std::lock_guard lk(mu_);
        return bytes_by_party_[0] + bytes_by_party_[1];
    }
    uint64_t rounds() const {
        std::lock_guard lk(mu_);
        return rounds_;
    }
    // Payload bytes excluding framing.
    uint64_t payload_bytes() const {
        std::lock_guard lk(mu_);
        uint64_t total = bytes_by_party_[0] + bytes_by_party_[1];
        auto it = labels_.find(kFramingLabel);
        return total - (it == labels_.end() ? 0 : it->second.bytes);
    }
    std::map<std::string, LabelStat> by_label() const {
        std::lock_guard lk(mu_);
        return labels_;
    }
    uint64_t label_bytes(const std::string& label) const {
        std::lock_guard lk(mu_);
        auto it = labels_.find(label);
        return it == labels_.end() ? 0 : it->second.bytes;
    }
    // Sum of bytes over labels with the given prefix.
    uint64_t label_prefix_bytes(const std::string& prefix) const {
        std::lock_guard lk(mu_);
        uint64_t n = 0;
        for (auto& [k, v] : labels_)
            if (k.rfind(prefix, 0) == 0) n += v.bytes;
        return n;
    }

private:
    mutable std::mutex mu_;
    uint64_t bytes_by_party_[2] = {0, 0};
    uint64_t rounds_ = 0;
    std::map<std::string, LabelStat> labels_;
    Party last_sender_ = Party::Server;
    bool any_ = false;
};

class Channel {
public:
    virtual ~Channel() = default;

    virtual Party party() const = 0;
    virtual CommMeter& meter() = 0;

    void set_label(std::string label) { label_ = std::move(label); }
    const std::string& label() const { return label_; }

    void send(const std::vector<uint8_t>& payload) {
        meter().record_send(party(), label_, payload.size(), kFrameHeaderBytes);
        send_frame(payload);
    }
    std::vector<uint8_t> recv() {
        auto payload = recv_frame();
        // Backends with a per-endpoint meter mirror inbound traffic so both
        // sides converge to the same totals; a shared meter already saw the
        // peer's send.
        if (!meter_is_shared())
            meter().record_send(other(party()), label_, payload.size(), kFrameHeaderBytes);
        return payload;
    }

    void send_u64(uint64_t v) {
        std::vector<uint8_t> b(8);
        for (int i = 0; i < 8; ++i) b[i] = uint8_t(v >> (8 * i));
        send(b);
    }
    uint64_t recv_u64() {
        auto b = recv();
        if (b.size() != 8) throw std::runtime_error("channel: framing violation (u64)");
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
        return v;
    }

    static constexpr uint64_t kFrameHeaderBytes = 4;  // u32 little-endian length

    // True when both endpoints account into one meter (in-process pairs).
    bool shared_meter() const { return meter_is_shared(); }

protected:
    // Raw frame exchange; metering is handled above so the two backends
    // account identically.
    virtual void send_frame(const std::vector<uint8_t>& payload) = 0;
    virtual std::vector<uint8_t> recv_frame() = 0;
    virtual bool meter_is_shared() const = 0;

private:
    std::string label_ = "default";
};

// RAII label scope: protocols set their meter label for the duration of a call.
class LabelScope {
public:
    LabelScope(Channel& ch, std::string label) : ch_(ch), prev_(ch.label()) {
        ch_.set_label(std::move(label));
    }
    ~LabelScope() { ch_.set_label(prev_); }

private:
    Channel& ch_;
    std::string prev_;
};

// ---------------------------------------------------------------------------
// In-process backend: a pair of endpoints over two mutex-guarded queues.

namespace detail {
struct InprocQueue {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::vector<uint8_t>> frames;
    bool closed = false;

    void push(std::vector<uint8_t> f) {
        {
            std::lock_guard lk(mu);
            frames.push_back(std::move(f));
        }
        cv.notify_one();
    }
    std::vector<uint8_t> pop() {
        std::unique_lock lk(mu);
        cv.wait(lk, [&] { return !frames.empty() || closed; });
        if (frames.empty()) throw std::runtime_error("channel: peer disconnected");
        auto f = std::move(frames.front());
        frames.pop_front();
        return f;
    }
    void close() {
        {
            std::lock_guard lk(mu);
            closed = true;
        }
        cv.notify_all();
    }
};

struct InprocShared {
    InprocQueue to_client;  // server -> client
    InprocQueue to_server;  // client -> server
    CommMeter meter;
};
}  // namespace detail

class InprocChannel final : public Channel {
public:
    InprocChannel(std::shared_ptr<detail::InprocShared> shared, Party party)
        : shared_(std::move(shared)), party_(party) {}
    ~InprocChannel() override {
        shared_->to_client.close();
        shared_->to_server.close();
    }

    Party party() const override { return party_; }
    CommMeter& meter() override { return shared_->meter; }

protected:
    void send_frame(const std::vector<uint8_t>& payload) override {
        (party_ == Party::Server ? shared_->to_client : shared_->to_server).push(payload);
    }
    std::vector<uint8_t> recv_frame() override {
        return (party_ == Party::Server ? shared_->to_server : shared_->to_client).pop();
    }
    bool meter_is_shared() const override { return true; }

private:
    std::shared_ptr<detail::InprocShared> shared_;
    Party party_;
};

// Both endpoints share one meter, so either side sees the full accounting.
inline std::pair<std::unique_ptr<InprocChannel>, std::unique_ptr<InprocChannel>> open_inproc_pair() {
    auto shared = std::make_shared<detail::InprocShared>();
    return {std::make_unique<InprocChannel>(shared, Party::Server),
            std::make_unique<InprocChannel>(shared, Party::Client)};
}

// ---------------------------------------------------------------------------
// TCP backend. Wire format: u32 little-endian length prefix + payload.

class TcpChannel final : public Channel {
public:
    TcpChannel(int fd, Party party) : fd_(fd), party_(party) {
        int one = 1;
        ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    }
    ~TcpChannel() override {
        if (fd_ >= 0) ::close(fd_);
    }
    TcpChannel(const TcpChannel&) = delete;
    TcpChannel& operator=(const TcpChannel&) = delete;

    Party party() const override { return party_; }
    CommMeter& meter() override { return meter_; }

protected:
    void send_frame(const std::vector<uint8_t>& payload) override {
        uint8_t hdr[4];
        uint32_t n = static_cast<uint32_t>(payload.size());
        for (int i = 0; i < 4; ++i) hdr[i] = uint8_t(n >> (8 * i));
        write_all(hdr, 4);
        if (n) write_all(payload.data(), n);
    }
    std::vector<uint8_t> recv_frame() override {
        uint8_t hdr[4];
        read_all(hdr, 4);
        uint32_t n = 0;
        for (int i = 0; i < 4; ++i) n |= uint32_t(hdr[i]) << (8 * i);
        std::vector<uint8_t> payload(n);
        if (n) read_all(payload.data(), n);
        return payload;
    }
    bool meter_is_shared() const override { return false; }

private:
    void write_all(const uint8_t* p, size_t n) {
        while (n) {
            ssize_t r = ::send(fd_, p, n, 0);
            if (r <= 0) throw std::runtime_error("channel: peer disconnected (send)");
            p += r;
            n -= static_cast<size_t>(r);
        }
    }
    void read_all(uint8_t* p, size_t n) {
        while (n) {
            ssize_t r = ::recv(fd_, p, n, 0);
            if (r <= 0) throw std::runtime_error("channel: peer disconnected (recv)");
            p += r;
            n -= static_cast<size_t>(r);
        }
    }

    int fd_ = -1;
    Party party_;
    CommMeter meter_;
};

namespace detail {
inline sockaddr_in parse_addr(const std::string& addr) {
    auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw std::runtime_error("address must be host:port");
    std::string host = addr.substr(0, colon);
    int port = std::stoi(addr.substr(colon + 1));
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(static_cast<uint16_t>(port));
    if (host.empty() || host == "*") host = "0.0.0.0";
    if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1)
        throw std::runtime_error("bad address: " + addr);
    return sa;
}
}  // namespace detail

// Server listens and accepts exactly one peer.
inline std::unique_ptr<TcpChannel> open_tcp_listen(const std::string& addr) {
    sockaddr_in sa = detail::parse_addr(addr);
    int lfd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (lfd < 0) throw std::runtime_error("socket() failed");
    int one = 1;
    ::setsockopt(lfd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(lfd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
        ::close(lfd);
        throw std::runtime_error("bind failed: " + addr);
    }
    if (::listen(lfd, 1) != 0) {
        ::close(lfd);
        throw std::runtime_error("listen failed: " + addr);
    }
    int fd = ::accept(lfd, nullptr, nullptr);
    ::close(lfd);
    if (fd < 0) throw std::runtime_error("accept failed: " + addr);
    return std::make_unique<TcpChannel>(fd, Party::Server);
}

inline std::unique_ptr<TcpChannel> open_tcp_connect(const std::string& addr, int retries = 50) {
    sockaddr_in sa = detail::parse_addr(addr);
    for (int attempt = 0;; ++attempt) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw std::runtime_error("socket() failed");
        if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) == 0)
            return std::make_unique<TcpChannel>(fd, Party::Client);
        ::close(fd);
        if (attempt >= retries) throw std::runtime_error("connect failed: " + addr);
        ::usleep(100 * 1000);
    }
}

}  // namespace quant2pc

#endif  // QUANT2PC_TRANSPORT_HPP_
