#include <cstdint>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "quant2pc/executor.hpp"
#include "quant2pc/graph.hpp"
#include "quant2pc/planner.hpp"
#include "quant2pc/tensor_io.hpp"

using namespace quant2pc;

namespace {

constexpr int kExitPass = 0;
constexpr int kExitMismatch = 2;
constexpr int kExitConfig = 3;

struct PipelineOptions {
    std::string plan_path;
    bool no_simplified_residual = false;
    bool no_signs = false;
    bool no_fusion = false;
    bool sirnn_default = false;  // force the fixed matmul lowering (variant 4)
};

Graph prepare_graph(const std::string& path, const PipelineOptions& o) {
    Graph g = load_graph_file(path);
    if (!o.plan_path.empty()) apply_plan(g, QuantPlan::load(o.plan_path));
    if (!o.no_simplified_residual) lower_residual_simplified(g);
    if (o.no_signs)
        clear_signs(g);
    else
        propagate_signs(g);
    if (!o.no_fusion) fuse_protocols(g);
    return g;
}

EstimateOptions estimate_options(const PipelineOptions& o) {
    return EstimateOptions{!o.no_signs, o.sirnn_default ? 4 : 0};
}

uint64_t env_seed(uint64_t fallback) {
    if (const char* s = std::getenv("QUANT2PC_SEED")) return std::stoull(s);
    return fallback;
}

std::string env_addr() {
    if (const char* s = std::getenv("QUANT2PC_ADDR")) return s;
    return "127.0.0.1:47555";
}

// One party's end of a secure run. Both parties derive the input and the
// share split from the shared seed, then keep only their own share.
RunReport run_party(Channel& ch, const Graph& g, uint64_t seed, const PipelineOptions& o) {
    RingTensor input = make_input(g, seed);
    std::mt19937_64 split_rng(seed ^ 0x517cc1b727220a95ULL);
    auto [server_share, client_share] = share(input, split_rng);
    Share mine = ch.party() == Party::Server ? server_share : client_share;

    OtSession ot(ch, seed + (ch.party() == Party::Server ? 1 : 2));
    ExecOptions exec{o.sirnn_default ? 4 : 0, false};
    ExecTrace t = run_graph_secure(ot, g, mine, exec);

    // reveal the output to both parties
    auto send_share = [&] {
        std::ostringstream buf;
        write_tensor(buf, t.output.tensor);
        std::string s = buf.str();
        ch.send(std::vector<uint8_t>(s.begin(), s.end()));
    };
    auto recv_share = [&] {
        auto bytes = ch.recv();
        std::istringstream in(std::string(bytes.begin(), bytes.end()));
        return read_tensor(in);
    };
    Share peer = t.output;
    {
        LabelScope scope(ch, "reveal");
        if (ch.party() == Party::Server) {
            send_share();
            peer.tensor = recv_share();
        } else {
            peer.tensor = recv_share();
            send_share();
        }
    }
    peer.party = other(ch.party());
    RingTensor out = reconstruct(t.output, peer);
    RingTensor oracle = run_graph_plain(g, input);
    bool ok = out.shape() == oracle.shape() && out.meta() == oracle.meta();
    for (size_t i = 0; ok && i < out.numel(); ++i) ok = out.at(i) == oracle.at(i);

    GraphEstimate est = estimate_graph_comm(g, estimate_options(o));
    return make_run_report(g, est, ch.meter(), ok, seed);
}

RunReport run_inproc(const Graph& g, uint64_t seed, const PipelineOptions& o) {
    auto [srv, cli] = open_inproc_pair();
    RunReport server_report;
    std::exception_ptr err;
    std::thread th([&] {
        try {
            server_report = run_party(*srv, g, seed, o);
        } catch (...) {
            err = std::current_exception();
            srv.reset();  // unblock the peer
        }
    });
    try {
        run_party(*cli, g, seed, o);
    } catch (...) {
        th.join();
        if (err) std::rethrow_exception(err);
        throw;
    }
    th.join();
    if (err) std::rethrow_exception(err);
    return server_report;
}

RunReport run_tcp_both(const Graph& g, uint64_t seed, const PipelineOptions& o,
                       const std::string& addr) {
    RunReport server_report;
    std::exception_ptr err;
    std::thread th([&] {
        try {
            auto ch = open_tcp_listen(addr);
            server_report = run_party(*ch, g, seed, o);
        } catch (...) {
            err = std::current_exception();
        }
    });
    auto ch = open_tcp_connect(addr);
    run_party(*ch, g, seed, o);
    th.join();
    if (err) std::rethrow_exception(err);
    return server_report;
}

void emit_report(const RunReport& r, const std::string& path) {
    std::string text = r.render();
    std::cout << text;
    if (!path.empty()) {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("cannot write report file: " + path);
        f << text;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"secure two-party quantized inference"};
    app.require_subcommand(1);

    // --- run ---
    auto* run = app.add_subcommand("run", "run a graph and verify against the plaintext oracle");
    std::string run_graph, run_role = "both", run_mode = "inproc", run_report_path;
    PipelineOptions run_pipe;
    uint64_t run_seed = env_seed(1);
    run->add_option("--graph", run_graph, "graph config file")->required();
    run->add_option("--role", run_role, "server | client | both")
        ->check(CLI::IsMember({"server", "client", "both"}));
    run->add_option("--mode", run_mode, "inproc | tcp")->check(CLI::IsMember({"inproc", "tcp"}));
    run->add_option("--plan", run_pipe.plan_path, "quantization plan file");
    run->add_option("--seed", run_seed, "shared input seed");
    run->add_option("--report", run_report_path, "write the report here");
    run->add_flag("--no-simplified-residual", run_pipe.no_simplified_residual);
    run->add_flag("--no-signs", run_pipe.no_signs);
    run->add_flag("--no-fusion", run_pipe.no_fusion);
    run->add_flag("--sirnn-default", run_pipe.sirnn_default);

    // --- compare ---
    auto* cmp = app.add_subcommand("compare", "measure ablation ratios against the optimized run");
    std::string cmp_graph;
    uint64_t cmp_seed = env_seed(1);
    std::vector<std::string> cmp_baselines = {"sirnn-default", "no-fusion", "no-signs",
                                              "no-simplified-residual"};
    cmp->add_option("--graph", cmp_graph, "graph config file")->required();
    cmp->add_option("--seed", cmp_seed, "shared input seed");
    cmp->add_option("--baselines", cmp_baselines, "subset of the ablations")
        ->check(CLI::IsMember(
            {"sirnn-default", "no-fusion", "no-signs", "no-simplified-residual", "all-off"}));

    // --- plan ---
    auto* pln = app.add_subcommand("plan", "solve a weight width plan under a budget");
    std::string pln_graph, pln_sens, pln_out;
    uint64_t pln_limit = 0;
    pln->add_option("--graph", pln_graph, "graph config file")->required();
    pln->add_option("--sens", pln_sens, "sensitivity file")->required();
    pln->add_option("--limit", pln_limit, "communication budget in bits")->required();
    pln->add_option("--out", pln_out, "write the plan here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitPass : kExitConfig;
    }

    try {
        if (*run) {
            Graph g = prepare_graph(run_graph, run_pipe);
            if (run_role != "both" && run_mode != "tcp")
                throw std::runtime_error("single-party roles require --mode tcp");
            RunReport r;
            if (run_role == "both") {
                r = run_mode == "tcp" ? run_tcp_both(g, run_seed, run_pipe, env_addr())
                                      : run_inproc(g, run_seed, run_pipe);
            } else if (run_role == "server") {
                auto ch = open_tcp_listen(env_addr());
                r = run_party(*ch, g, run_seed, run_pipe);
            } else {
                auto ch = open_tcp_connect(env_addr());
                r = run_party(*ch, g, run_seed, run_pipe);
            }
            emit_report(r, run_report_path);
            return r.bit_exact ? kExitPass : kExitMismatch;
        }

        if (*cmp) {
            Graph opt_graph = prepare_graph(cmp_graph, PipelineOptions{});
            RunReport opt = run_inproc(opt_graph, cmp_seed, PipelineOptions{});
            if (!opt.bit_exact) return kExitMismatch;
            std::cout << "compare graph=" << opt_graph.name << " seed=" << cmp_seed << "\n";
            std::cout << "row name=optimized payload_bytes=" << opt.payload_bytes
                      << " ratio=1.000\n";
            bool ok = true;
            for (const std::string& name : cmp_baselines) {
                PipelineOptions p;
                if (name == "sirnn-default" || name == "all-off") p.sirnn_default = true;
                if (name == "no-fusion" || name == "all-off") p.no_fusion = true;
                if (name == "no-signs" || name == "all-off") p.no_signs = true;
                if (name == "no-simplified-residual" || name == "all-off")
                    p.no_simplified_residual = true;
                Graph g = prepare_graph(cmp_graph, p);
                RunReport r = run_inproc(g, cmp_seed, p);
                ok = ok && r.bit_exact;
                std::ostringstream ratio;
                ratio.setf(std::ios::fixed);
                ratio.precision(3);
                ratio << double(r.payload_bytes) / double(opt.payload_bytes);
                std::cout << "row name=" << name << " payload_bytes=" << r.payload_bytes
                          << " ratio=" << ratio.str() << "\n";
            }
            return ok ? kExitPass : kExitMismatch;
        }

        // plan
        Graph g = load_graph_file(pln_graph);
        SensitivityTable sens = SensitivityTable::load(pln_sens);
        QuantPlan plan = solve_plan(plan_items_for(g, sens), pln_limit, g.act_bits);
        std::string text = plan.serialize();
        std::cout << text;
        if (!pln_out.empty()) {
            std::ofstream f(pln_out);
            if (!f) throw std::runtime_error("cannot write plan file: " + pln_out);
            f << text;
        }
        return kExitPass;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}
